//! Beam search and file translation.

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::TokenMatrix;
use crate::error::{Error, Result};
use crate::model::{DecoderState, ModelConfig, ParameterSet};
use crate::subword::{segment_line, MergeTable, Vocabulary, BOS, EOS, PAD};

/// Extra target tokens allowed beyond the source length.
pub const DEFAULT_EXTRA_LEN: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Starts with BOS.
    pub tokens: Vec<u32>,
    pub logprob_sum: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Generated tokens, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tokens after BOS with a trailing EOS removed.
    pub fn output(&self) -> &[u32] {
        let t = &self.tokens[1..];
        t.strip_suffix(&[EOS]).unwrap_or(t)
    }

    pub fn score(&self, alpha: f64) -> f64 {
        normalized(self.logprob_sum, self.len(), alpha)
    }
}

fn normalized(sum: f64, len: usize, alpha: f64) -> f64 {
    sum / (len.max(1) as f64).powf(alpha)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamConfig {
    pub beam: usize,
    pub alpha: f64,
    /// Generated-token limit; `None` means source length + 50.
    pub max_len: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam: 4,
            alpha: 1.0,
            max_len: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Every retired hypothesis, best first.
    pub finished: Vec<Hypothesis>,
    /// Decoder steps actually run.
    pub steps: usize,
}

fn start(params: &ParameterSet<f32>, cfg: &ModelConfig, src: &[u32], max_len: Option<usize>) -> Result<(DecoderState, usize)> {
    if src.is_empty() {
        return Err(Error::InvalidArgument("empty source sentence".into()));
    }
    if let Some(&bad) = src.iter().find(|&&t| t as usize >= cfg.src_vocab) {
        return Err(Error::InvalidArgument(format!("source id {bad} outside vocabulary of {}", cfg.src_vocab)));
    }
    let max_len = max_len.unwrap_or(src.len() + DEFAULT_EXTRA_LEN).min(cfg.max_len);
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut row = src.to_vec();
    row.push(EOS);
    let state = DecoderState::new(params, cfg, &TokenMatrix::from_rows(&[row]))?;
    Ok((state, max_len))
}

/// Whether `token` may be generated. PAD and BOS never appear in targets.
pub fn can_emit(token: u32) -> bool {
    token != PAD && token != BOS
}

/// Left-to-right beam search.
///
/// Each step keeps the `beam` best expansions by cumulative log-probability.
/// Expansions ending in EOS, or reaching `max_len`, retire into the finished
/// pool and the live beam shrinks for that step. Search stops when nothing
/// is live or no live hypothesis can still beat the best finished score.
pub fn beam_search(params: &ParameterSet<f32>, cfg: &ModelConfig, src: &[u32], bc: &BeamConfig) -> Result<BeamOutput> {
    if bc.beam == 0 {
        return Err(Error::InvalidArgument("beam must be at least 1".into()));
    }
    if !(bc.alpha >= 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be non-negative, got {}", bc.alpha)));
    }
    let (mut state, max_len) = start(params, cfg, src, bc.max_len)?;
    let mut live = vec![Hypothesis {
        tokens: vec![BOS],
        logprob_sum: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut steps = 0;
    for step in 0..max_len {
        let last: Vec<u32> = live.iter().map(|h| *h.tokens.last().expect("BOS")).collect();
        let lp = state.step(params, cfg, &last)?;
        steps += 1;
        let v = cfg.tgt_vocab;
        let mut cands: Vec<(f64, usize, u32)> = Vec::with_capacity(live.len() * v);
        for (i, h) in live.iter().enumerate() {
            let row = &lp.data()[i * v..(i + 1) * v];
            for (t, &l) in row.iter().enumerate() {
                if can_emit(t as u32) {
                    cands.push((h.logprob_sum + l as f64, i, t as u32));
                }
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        cands.truncate(bc.beam);

        let at_limit = step + 1 == max_len;
        let mut next = Vec::with_capacity(cands.len());
        let mut parents = Vec::with_capacity(cands.len());
        for (sum, i, t) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(t);
            let done = t == EOS || at_limit;
            let h = Hypothesis {
                tokens,
                logprob_sum: sum,
                finished: done,
            };
            if done {
                finished.push(h);
            } else {
                next.push(h);
                parents.push(i);
            }
        }
        if next.is_empty() {
            break;
        }
        let best_done = finished.iter().map(|h| h.score(bc.alpha)).fold(f64::NEG_INFINITY, f64::max);
        // log-probs are <= 0, so a live sum can only fall; with alpha >= 0 the
        // longest possible length gives its most favourable score
        let best_live = next.iter().map(|h| h.logprob_sum).fold(f64::NEG_INFINITY, f64::max);
        if normalized(best_live, max_len, bc.alpha) <= best_done {
            break;
        }
        state.reorder(&parents)?;
        live = next;
    }
    // stable sort keeps earlier-retired hypotheses first among equal scores
    finished.sort_by(|a, b| b.score(bc.alpha).partial_cmp(&a.score(bc.alpha)).unwrap_or(Ordering::Equal));
    let best = finished.first().cloned().ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))?;
    Ok(BeamOutput { best, finished, steps })
}

/// Arg-max decoding until EOS or `max_len` generated tokens.
pub fn greedy_decode(params: &ParameterSet<f32>, cfg: &ModelConfig, src: &[u32], max_len: Option<usize>) -> Result<Hypothesis> {
    let (mut state, max_len) = start(params, cfg, src, max_len)?;
    let mut h = Hypothesis {
        tokens: vec![BOS],
        logprob_sum: 0.0,
        finished: false,
    };
    while h.len() < max_len {
        let lp = state.step(params, cfg, &[*h.tokens.last().expect("BOS")])?;
        let (t, l) = lp
            .data()
            .iter()
            .enumerate()
            .filter(|(t, _)| can_emit(*t as u32))
            .fold((0, f32::NEG_INFINITY), |best, (t, &l)| if l > best.1 { (t, l) } else { best });
        h.tokens.push(t as u32);
        h.logprob_sum += l as f64;
        if t as u32 == EOS {
            break;
        }
    }
    h.finished = true;
    Ok(h)
}

/// A checkpoint with the artifacts needed to go from text to text.
pub struct Translator {
    pub params: ParameterSet<f32>,
    pub cfg: ModelConfig,
    pub src_merges: MergeTable,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
}

impl Translator {
    pub fn new(
        params: ParameterSet<f32>,
        cfg: ModelConfig,
        src_merges: MergeTable,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
    ) -> Result<Self> {
        params.check_against(&cfg)?;
        if src_vocab.len() != cfg.src_vocab || tgt_vocab.len() != cfg.tgt_vocab {
            return Err(Error::Config(format!(
                "vocabulary sizes {}/{} do not match the checkpoint's {}/{}",
                src_vocab.len(),
                tgt_vocab.len(),
                cfg.src_vocab,
                cfg.tgt_vocab
            )));
        }
        Ok(Translator {
            params,
            cfg,
            src_merges,
            src_vocab,
            tgt_vocab,
        })
    }

    /// Empty (or all-whitespace) lines translate to empty lines.
    pub fn translate_line(&self, line: &str, bc: &BeamConfig) -> Result<String> {
        let ids = self.src_vocab.encode(&segment_line(line, &self.src_merges), false);
        if ids.is_empty() {
            return Ok(String::new());
        }
        let limit = self.cfg.max_len.saturating_sub(1);
        let ids = if ids.len() > limit {
            log::warn!("source of {} tokens truncated to {limit}", ids.len());
            &ids[..limit]
        } else {
            &ids[..]
        };
        let out = beam_search(&self.params, &self.cfg, ids, bc)?;
        self.tgt_vocab.decode(out.best.output())
    }

    /// Translates `lines` on up to `threads` worker threads; order is kept.
    pub fn translate_lines(&self, lines: &[String], bc: &BeamConfig, threads: usize) -> Result<Vec<String>> {
        let threads = threads.max(1).min(lines.len().max(1));
        let chunk = lines.len().div_ceil(threads).max(1);
        std::thread::scope(|s| {
            let handles: Vec<_> = lines
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(|l| self.translate_line(l, bc)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(lines.len());
            for h in handles {
                out.extend(h.join().expect("translation worker panicked")?);
            }
            Ok(out)
        })
    }
}

/// Translates `input` line by line into `output`. Returns the line count.
pub fn translate_file(t: &Translator, input: &Path, output: &Path, bc: &BeamConfig, threads: usize) -> Result<usize> {
    let text = fs::read_to_string(input).map_err(|e| Error::io(input, e))?;
    let lines: Vec<String> = text.lines().map(|l| l.trim_end_matches('\r').to_owned()).collect();
    let out = t.translate_lines(&lines, bc, threads)?;
    let mut f = fs::File::create(output).map_err(|e| Error::io(output, e))?;
    for l in &out {
        writeln!(f, "{l}").map_err(|e| Error::io(output, e))?;
    }
    Ok(out.len())
}

/// Fraction of reference target positions reproduced by greedy decoding.
/// Missing or extra positions count as errors against the longer side.
pub fn greedy_token_accuracy(params: &ParameterSet<f32>, cfg: &ModelConfig, pairs: &[crate::corpus::EncodedPair]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for p in pairs {
        let h = greedy_decode(params, cfg, &p.src, Some(p.tgt.len() + 5))?;
        let out = h.output();
        hit += out.iter().zip(&p.tgt).filter(|(a, b)| a == b).count();
        total += out.len().max(p.tgt.len());
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(hit as f64 / total as f64)
}
