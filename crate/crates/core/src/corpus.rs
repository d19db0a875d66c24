//! Parallel file reading, the validation holdout, length filtering and
//! token-budget batching.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::subword::{parse_marked_text, Vocabulary, BOS, EOS, PAD};
use crate::textnorm::RawPair;

/// Reads two line-aligned files. A trailing `\r` is stripped from each line.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<RawPair>> {
    let a = read_lines(src)?;
    let b = read_lines(tgt)?;
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            src.display(),
            a.len(),
            tgt.display(),
            b.len()
        )));
    }
    Ok(a.into_iter()
        .zip(b)
        .enumerate()
        .map(|(i, (src, tgt))| RawPair { src, tgt, line_no: i + 1 })
        .collect())
}

/// Raw byte lines; the final newline does not start an extra line.
pub fn read_lines(path: &Path) -> Result<Vec<Vec<u8>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(&bytes);
    Ok(body
        .split(|&b| b == b'\n')
        .map(|l| l.strip_suffix(b"\r").unwrap_or(l).to_vec())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub holdout_n: usize,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { holdout_n: 1000 }
    }
}

/// The last `holdout_n` items become validation data; order is preserved.
pub fn holdout_split<T>(mut items: Vec<T>, spec: SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if spec.holdout_n >= items.len() {
        return Err(Error::InvalidArgument(format!(
            "holdout of {} needs more than {} pairs",
            spec.holdout_n,
            items.len()
        )));
    }
    let valid = items.split_off(items.len() - spec.holdout_n);
    Ok((items, valid))
}

/// Token ids for one pair, without BOS/EOS.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    pub id: usize,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl EncodedPair {
    /// Source length as fed to the encoder (with EOS).
    pub fn src_len(&self) -> usize {
        self.src.len() + 1
    }

    /// Target tokens predicted by the decoder (with EOS).
    pub fn tgt_len(&self) -> usize {
        self.tgt.len() + 1
    }
}

/// Encodes `@@`-marked BPE lines; ids are positions in the input.
pub fn encode_marked<S: AsRef<str>>(
    src: &[S],
    tgt: &[S],
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<Vec<EncodedPair>> {
    if src.len() != tgt.len() {
        return Err(Error::Data(format!(
            "{} source lines but {} target lines",
            src.len(),
            tgt.len()
        )));
    }
    Ok(src
        .iter()
        .zip(tgt)
        .enumerate()
        .map(|(id, (s, t))| EncodedPair {
            id,
            src: src_vocab.encode(&parse_marked_text(s.as_ref()), false),
            tgt: tgt_vocab.encode(&parse_marked_text(t.as_ref()), false),
        })
        .collect())
}

pub const DEFAULT_MAX_LEN: usize = 256;

/// Drops pairs with an empty side or a side longer than `max_len` tokens.
/// Returns the survivors and the number dropped.
pub fn filter_length(pairs: Vec<EncodedPair>, max_len: usize) -> (Vec<EncodedPair>, usize) {
    let before = pairs.len();
    let kept: Vec<EncodedPair> = pairs
        .into_iter()
        .filter(|p| !p.src.is_empty() && !p.tgt.is_empty() && p.src.len() <= max_len && p.tgt.len() <= max_len)
        .collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

/// Row-major `rows × cols` id matrix padded with PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u32>,
}

impl TokenMatrix {
    pub fn from_rows(rows: &[Vec<u32>]) -> Self {
        let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
        let mut data = vec![PAD; rows.len() * cols];
        for (r, row) in rows.iter().enumerate() {
            data[r * cols..r * cols + row.len()].copy_from_slice(row);
        }
        TokenMatrix { rows: rows.len(), cols, data }
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.cols + c]
    }

    pub fn non_pad(&self) -> usize {
        self.data.iter().filter(|&&t| t != PAD).count()
    }

    /// `rows × cols` mask, true at padding.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&t| t == PAD).collect()
    }
}

/// A padded group of pairs ready for one forward/backward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MicroBatch {
    pub pair_ids: Vec<usize>,
    /// Source ids followed by EOS.
    pub src: TokenMatrix,
    /// BOS followed by target ids.
    pub tgt_in: TokenMatrix,
    /// Target ids followed by EOS.
    pub tgt_out: TokenMatrix,
}

impl MicroBatch {
    pub fn from_pairs(pairs: &[&EncodedPair]) -> Self {
        let src: Vec<Vec<u32>> = pairs.iter().map(|p| with_suffix(&p.src, EOS)).collect();
        let tgt_in: Vec<Vec<u32>> = pairs
            .iter()
            .map(|p| std::iter::once(BOS).chain(p.tgt.iter().copied()).collect())
            .collect();
        let tgt_out: Vec<Vec<u32>> = pairs.iter().map(|p| with_suffix(&p.tgt, EOS)).collect();
        MicroBatch {
            pair_ids: pairs.iter().map(|p| p.id).collect(),
            src: TokenMatrix::from_rows(&src),
            tgt_in: TokenMatrix::from_rows(&tgt_in),
            tgt_out: TokenMatrix::from_rows(&tgt_out),
        }
    }

    pub fn len(&self) -> usize {
        self.pair_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_ids.is_empty()
    }

    /// Real (non-pad) target tokens: the loss denominator.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.non_pad()
    }

    /// Padded target size, the quantity bounded by the batch budget.
    pub fn padded_target_tokens(&self) -> usize {
        self.tgt_out.rows * self.tgt_out.cols
    }
}

fn with_suffix(ids: &[u32], last: u32) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 1);
    v.extend_from_slice(ids);
    v.push(last);
    v
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batches {
    pub batches: Vec<MicroBatch>,
    /// Pairs whose target alone exceeds the budget.
    pub dropped: usize,
}

/// Length-bucketed micro-batches for one epoch.
///
/// Pairs are sorted by target then source length (ties broken by a seeded
/// shuffle), packed greedily so that `rows × longest target` stays within
/// `max_tokens`, and the batch order is shuffled. `(seed, epoch)` fully
/// determines the result.
pub fn make_batches(pairs: &[EncodedPair], max_tokens: usize, seed: u64, epoch: u64) -> Batches {
    let mut rng = seed::rng(&[seed, epoch, 0xBA7C]);
    let mut order: Vec<&EncodedPair> = Vec::with_capacity(pairs.len());
    let mut dropped = 0;
    for p in pairs {
        if p.tgt_len() > max_tokens {
            dropped += 1;
        } else {
            order.push(p);
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} pairs exceed the {max_tokens}-token micro-batch budget and were skipped");
    }
    order.shuffle(&mut rng);
    order.sort_by_key(|p| (p.tgt_len(), p.src_len()));

    let mut batches = Vec::new();
    let mut current: Vec<&EncodedPair> = Vec::new();
    let mut longest = 0;
    for p in order {
        let l = longest.max(p.tgt_len());
        if !current.is_empty() && (current.len() + 1) * l > max_tokens {
            batches.push(MicroBatch::from_pairs(&current));
            current.clear();
            longest = 0;
        }
        longest = longest.max(p.tgt_len());
        current.push(p);
    }
    if !current.is_empty() {
        batches.push(MicroBatch::from_pairs(&current));
    }
    batches.shuffle(&mut rng);
    Batches { batches, dropped }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(id: usize, s: usize, t: usize) -> EncodedPair {
        EncodedPair {
            id,
            src: vec![5; s],
            tgt: vec![6; t],
        }
    }

    #[test]
    fn holdout_examples() {
        let (tr, va) = holdout_split((0..10).collect(), SplitSpec { holdout_n: 3 }).unwrap();
        assert_eq!(tr, (0..7).collect::<Vec<_>>());
        assert_eq!(va, [7, 8, 9]);
        let (tr, va) = holdout_split((0..10).collect::<Vec<_>>(), SplitSpec { holdout_n: 0 }).unwrap();
        assert_eq!(tr.len(), 10);
        assert!(va.is_empty());
        assert!(holdout_split((0..3).collect::<Vec<_>>(), SplitSpec { holdout_n: 3 }).is_err());
    }

    #[test]
    fn holdout_of_200k_takes_the_tail_by_line_number() {
        let lines: Vec<usize> = (1..=200_000).collect();
        let (tr, va) = holdout_split(lines, SplitSpec::default()).unwrap();
        assert_eq!(va.first(), Some(&199_001));
        assert_eq!(va.last(), Some(&200_000));
        assert_eq!(tr.len(), 199_000);
    }

    #[test]
    fn equal_lengths_pack_in_pairs() {
        let pairs: Vec<EncodedPair> = (0..10).map(|i| pair(i, 4, 4)).collect();
        let b = make_batches(&pairs, 10, 1, 1);
        assert!(b.batches.iter().all(|m| m.len() == 2));
        assert_eq!(b.batches.len(), 5);
    }

    #[test]
    fn batch_tensors_have_specials() {
        let p = pair(0, 2, 3);
        let m = MicroBatch::from_pairs(&[&p]);
        assert_eq!(m.src.row(0), [5, 5, EOS]);
        assert_eq!(m.tgt_in.row(0), [BOS, 6, 6, 6]);
        assert_eq!(m.tgt_out.row(0), [6, 6, 6, EOS]);
        assert_eq!(m.target_tokens(), 4);
    }

    #[test]
    fn too_long_pairs_are_dropped() {
        let pairs = vec![pair(0, 2, 2), pair(1, 2, 20)];
        let b = make_batches(&pairs, 8, 0, 0);
        assert_eq!(b.dropped, 1);
        assert_eq!(b.batches.len(), 1);
    }

    #[test]
    fn length_filter() {
        let (kept, dropped) = filter_length(vec![pair(0, 3, 3), pair(1, 300, 2), pair(2, 0, 2)], 256);
        assert_eq!(kept.len(), 1);
        assert_eq!(dropped, 2);
    }

    #[test]
    fn read_parallel_checks_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        std::fs::write(&a, "x\r\ny\n").unwrap();
        std::fs::write(&b, "1\n2").unwrap();
        let pairs = read_parallel(&a, &b).unwrap();
        assert_eq!(pairs[0].src, b"x");
        assert_eq!(pairs[1].tgt, b"2");
        std::fs::write(&b, "1\n").unwrap();
        assert!(read_parallel(&a, &b).is_err());
    }
}
