//! A seeded synthetic parallel corpus with the kinds of noise the cleaning
//! stage handles.
//!
//! Sources are space-separated words in Thai script. Each target is the
//! word-by-word lexicon translation in reverse order, written without spaces
//! in CJK characters. A small fraction of lines carry fullwidth forms,
//! character references, traditional variants, invalid bytes or are empty.

use std::collections::BTreeSet;

use nmt_core::seed;
use rand::seq::SliceRandom;
use rand::Rng;

const THAI_CONSONANTS: std::ops::RangeInclusive<u32> = 0x0E01..=0x0E2E;
const THAI_VOWELS: [char; 6] = ['\u{0E30}', '\u{0E32}', '\u{0E34}', '\u{0E35}', '\u{0E38}', '\u{0E40}'];

/// Simplified characters; the first group has traditional variants in the
/// built-in sample mapping.
const HAN: &str = "体学国语说话来们这个时会为对发开关长门东车马鸟鱼见书天地人水火山月日木大小上下中心手口耳目白黑红花草风云雨雪";

/// Traditional forms for the first characters of [`HAN`].
const TRADITIONAL: [(char, char); 8] = [
    ('体', '體'),
    ('学', '學'),
    ('国', '國'),
    ('语', '語'),
    ('说', '說'),
    ('话', '話'),
    ('来', '來'),
    ('们', '們'),
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTextSpec {
    pub pairs: usize,
    pub words: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Probability that a line receives one kind of noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthTextSpec {
    fn default() -> Self {
        SynthTextSpec {
            pairs: 1500,
            words: 60,
            min_words: 2,
            max_words: 7,
            noise: 0.08,
            seed: 2022,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthText {
    pub src: Vec<Vec<u8>>,
    pub tgt: Vec<Vec<u8>>,
    /// Target words, for segmenting the unspaced side.
    pub tgt_lexicon: Vec<String>,
}

fn to_fullwidth(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '!'..='~' => char::from_u32(c as u32 + 0xFEE0).expect("fullwidth range"),
            ' ' => '\u{3000}',
            c => c,
        })
        .collect()
}

pub fn generate(spec: &SynthTextSpec) -> SynthText {
    let mut rng = seed::rng(&[spec.seed, 0x7e47]);
    let consonants: Vec<char> = THAI_CONSONANTS.filter_map(char::from_u32).collect();
    let han: Vec<char> = HAN.chars().collect();

    let mut seen = BTreeSet::new();
    let mut src_words = Vec::new();
    while src_words.len() < spec.words {
        let n = rng.gen_range(2..=4);
        let mut cs: Vec<char> = (0..n).map(|_| *consonants.choose(&mut rng).expect("letters")).collect();
        cs.insert(rng.gen_range(1..=n), *THAI_VOWELS.choose(&mut rng).expect("vowels"));
        let w: String = cs.into_iter().collect();
        if seen.insert(w.clone()) {
            src_words.push(w);
        }
    }
    let mut seen = BTreeSet::new();
    let mut tgt_words = Vec::new();
    while tgt_words.len() < spec.words {
        let n = rng.gen_range(1..=2);
        let w: String = (0..n).map(|_| *han.choose(&mut rng).expect("han")).collect();
        if seen.insert(w.clone()) {
            tgt_words.push(w);
        }
    }

    // Zipf-like word frequencies.
    let weights: Vec<f64> = (1..=spec.words).map(|r| 1.0 / r as f64).collect();
    let total: f64 = weights.iter().sum();
    let pick = |rng: &mut dyn rand::RngCore| {
        let mut x = rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            if x < *w {
                return i;
            }
            x -= w;
        }
        weights.len() - 1
    };

    let mut src = Vec::with_capacity(spec.pairs);
    let mut tgt = Vec::with_capacity(spec.pairs);
    for _ in 0..spec.pairs {
        let n = rng.gen_range(spec.min_words..=spec.max_words);
        let ids: Vec<usize> = (0..n).map(|_| pick(&mut rng)).collect();
        let mut s = ids.iter().map(|&i| src_words[i].as_str()).collect::<Vec<_>>().join(" ");
        let mut t: String = ids.iter().rev().map(|&i| tgt_words[i].as_str()).collect();
        let mut raw_src: Option<Vec<u8>> = None;
        if rng.gen_bool(spec.noise) {
            match rng.gen_range(0..6) {
                0 => {
                    let num = rng.gen_range(1..100).to_string();
                    s = format!("{s} {}", to_fullwidth(&num));
                    t = format!("{num}{t}");
                }
                1 => {
                    s = format!("{s} &amp;");
                    t = format!("&#38;{t}");
                }
                2 => {
                    t = t
                        .chars()
                        .map(|c| TRADITIONAL.iter().find(|p| p.0 == c).map_or(c, |p| p.1))
                        .collect();
                    t.push('&');
                    t.push_str("lt;");
                    s.push_str(" <");
                }
                3 => {
                    let mut b = s.clone().into_bytes();
                    b.extend_from_slice(&[0xFF, 0xFE]);
                    raw_src = Some(b);
                }
                4 => {
                    s = String::new();
                }
                _ => {
                    s = to_fullwidth("(") + &s + &to_fullwidth(")");
                    t = format!("({t})");
                }
            }
        }
        src.push(raw_src.unwrap_or_else(|| s.into_bytes()));
        tgt.push(t.into_bytes());
    }
    SynthText {
        src,
        tgt,
        tgt_lexicon: tgt_words,
    }
}

pub fn join_lines(lines: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    for l in lines {
        out.extend_from_slice(l);
        out.push(b'\n');
    }
    out
}
