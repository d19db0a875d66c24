//! Small synthetic translation tasks with known answers.

use rand::Rng;

use crate::corpus::EncodedPair;
use crate::seed;
use crate::subword::RESERVED;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Copy,
    Reverse,
}

impl Task {
    pub fn apply(self, src: &[u32]) -> Vec<u32> {
        match self {
            Task::Copy => src.to_vec(),
            Task::Reverse => src.iter().rev().copied().collect(),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            other => Err(crate::Error::InvalidArgument(format!("unknown task {other:?} (copy, reverse)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SynthSpec {
    pub task: Task,
    /// Total vocabulary including the reserved ids.
    pub vocab: usize,
    pub min_len: usize,
    pub max_len: usize,
}

/// `n` pairs with symbols drawn uniformly from the non-reserved ids.
/// Ids are numbered from `first_id`.
pub fn pairs(spec: &SynthSpec, n: usize, seed: u64, first_id: usize) -> Vec<EncodedPair> {
    let lo = RESERVED.len() as u32;
    assert!(spec.vocab > RESERVED.len(), "vocabulary has no free symbols");
    assert!(1 <= spec.min_len && spec.min_len <= spec.max_len);
    let mut rng = seed::rng(&[seed, 0x5947]);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let src: Vec<u32> = (0..len).map(|_| rng.gen_range(lo..spec.vocab as u32)).collect();
            EncodedPair {
                id: first_id + i,
                tgt: spec.task.apply(&src),
                src,
            }
        })
        .collect()
}
