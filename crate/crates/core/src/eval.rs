//! Character-level corpus BLEU.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Splits into code points, dropping whitespace.
pub fn char_tokenize(s: &str) -> Vec<char> {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Smoothing {
    /// Plain corpus BLEU: any empty order zeroes the score.
    #[default]
    None,
    /// Replace zero matches with this value. For sentence-level debugging.
    Floor(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    /// Percentages, orders 1..=max_n.
    pub precisions: Vec<f64>,
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuReport {
    pub fn max_n(&self) -> usize {
        self.precisions.len()
    }

    /// `BLEU<N>\tscore\tp1\t...\tpN\tbp\thyp_len\tref_len`
    pub fn tsv_line(&self) -> String {
        let mut fields = vec![format!("BLEU{}", self.max_n()), format!("{:.4}", self.score)];
        fields.extend(self.precisions.iter().map(|p| format!("{p:.4}")));
        fields.push(format!("{:.6}", self.brevity_penalty));
        fields.push(self.hyp_len.to_string());
        fields.push(self.ref_len.to_string());
        fields.join("\t")
    }
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let precs: Vec<String> = self.precisions.iter().map(|p| format!("{p:.1}")).collect();
        write!(
            f,
            "BLEU{} = {:.2} {} (BP = {:.3} hyp_len = {} ref_len = {})",
            self.max_n(),
            self.score,
            precs.join("/"),
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Sufficient statistics; adding two of them is the corpus-level merge.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: Vec<u64>,
    pub totals: Vec<u64>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn new(max_n: usize) -> Self {
        BleuStats {
            matches: vec![0; max_n],
            totals: vec![0; max_n],
            hyp_len: 0,
            ref_len: 0,
        }
    }

    pub fn add_sentence(&mut self, hyp: &str, reference: &str) {
        let h = char_tokenize(hyp);
        let r = char_tokenize(reference);
        self.hyp_len += h.len();
        self.ref_len += r.len();
        for n in 1..=self.matches.len() {
            if h.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[char], u64> = HashMap::new();
            for g in r.windows(n) {
                *ref_counts.entry(g).or_insert(0) += 1;
            }
            let mut hyp_counts: HashMap<&[char], u64> = HashMap::new();
            for g in h.windows(n) {
                *hyp_counts.entry(g).or_insert(0) += 1;
            }
            let clipped: u64 = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
            self.matches[n - 1] += clipped;
            self.totals[n - 1] += (h.len() + 1 - n) as u64;
        }
    }

    pub fn merge(&mut self, other: &BleuStats) {
        for (a, b) in self.matches.iter_mut().zip(&other.matches) {
            *a += b;
        }
        for (a, b) in self.totals.iter_mut().zip(&other.totals) {
            *a += b;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }

    pub fn report(&self, smoothing: Smoothing) -> BleuReport {
        let precisions: Vec<f64> = self
            .matches
            .iter()
            .zip(&self.totals)
            .map(|(&m, &t)| if t == 0 { 0.0 } else { 100.0 * m as f64 / t as f64 })
            .collect();
        let brevity_penalty = if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        let mut log_sum = 0.0;
        let mut zero = false;
        for (&m, &t) in self.matches.iter().zip(&self.totals) {
            let m = match smoothing {
                _ if m > 0 => m as f64,
                Smoothing::Floor(eps) if t > 0 => eps,
                _ => {
                    zero = true;
                    break;
                }
            };
            log_sum += (m / t as f64).ln();
        }
        let score = if zero {
            0.0
        } else {
            (brevity_penalty * (log_sum / self.matches.len() as f64).exp() * 100.0).clamp(0.0, 100.0)
        };
        BleuReport {
            score,
            precisions,
            matches: self.matches.clone(),
            totals: self.totals.clone(),
            brevity_penalty,
            hyp_len: self.hyp_len,
            ref_len: self.ref_len,
        }
    }
}

/// Unsmoothed corpus BLEU over character n-grams of orders `1..=max_n`.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R], max_n: usize) -> Result<BleuReport> {
    bleu_with(hyps, refs, max_n, Smoothing::None)
}

pub fn bleu_with<H: AsRef<str>, R: AsRef<str>>(
    hyps: &[H],
    refs: &[R],
    max_n: usize,
    smoothing: Smoothing,
) -> Result<BleuReport> {
    if hyps.len() != refs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(Error::InvalidArgument("no sentences to score".into()));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be at least 1".into()));
    }
    let mut stats = BleuStats::new(max_n);
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_sentence(h.as_ref(), r.as_ref());
    }
    Ok(stats.report(smoothing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(char_tokenize("你好"), ['你', '好']);
        assert_eq!(char_tokenize("a b"), ['a', 'b']);
        assert_eq!(char_tokenize(" x\ty ").len(), 2);
    }

    #[test]
    fn identical_corpus_scores_100() {
        let r = bleu(&["abcdef", "你好世界"], &["abcdef", "你好世界"], 4).unwrap();
        assert!((r.score - 100.0).abs() < 1e-9);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn disjoint_scores_zero() {
        let r = bleu(&["abcd"], &["wxyz"], 4).unwrap();
        assert_eq!(r.score, 0.0);
        assert_eq!(r.precisions[0], 0.0);
    }

    #[test]
    fn errors() {
        assert!(bleu(&["a"], &["a", "b"], 4).is_err());
        assert!(bleu::<&str, &str>(&[], &[], 4).is_err());
        assert!(bleu(&["a"], &["a"], 0).is_err());
    }

    #[test]
    fn empty_hypothesis_has_zero_bp() {
        let r = bleu(&[""], &["abc"], 1).unwrap();
        assert_eq!(r.brevity_penalty, 0.0);
        assert_eq!(r.score, 0.0);
    }

    #[test]
    fn floor_smoothing_rescues_missing_orders() {
        let r = bleu_with(&["abcx"], &["abcy"], 4, Smoothing::Floor(0.1)).unwrap();
        assert!(r.score > 0.0);
        assert_eq!(bleu(&["abcx"], &["abcy"], 4).unwrap().score, 0.0);
    }
}
