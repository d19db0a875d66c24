//! Low-resource neural machine translation workbench.
//!
//! The crate covers the whole path from raw parallel text to a scored
//! translation:
//!
//! ```text
//! raw pairs ─ textnorm ─ corpus (holdout, batching) ─ subword (BPE)
//!      └─ model (post-LN Transformer, relative positions) ─ train ─ decode ─ eval
//! ```
//!
//! Everything numeric runs on the small reverse-mode autodiff core in
//! [`tensor`], which is generic over `f32` (training) and `f64` (gradient
//! checks).

pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod seed;
pub mod subword;
pub mod synth;
pub mod tensor;
pub mod textnorm;
pub mod train;

pub use corpus::{holdout_split, make_batches, EncodedPair, MicroBatch, SplitSpec};
pub use decode::{beam_search, greedy_decode, translate_file, BeamConfig, Hypothesis, Translator};
pub use error::{Error, ErrorKind, Result};
pub use eval::{bleu, char_tokenize, BleuReport};
pub use corpus::TokenMatrix;
pub use model::{init_parameters, relative_index, ModelConfig, ParameterSet};
pub use subword::{apply_bpe, learn_bpe, MergeTable, Vocabulary};
pub use tensor::{Graph, Real, Tensor, Var};
pub use textnorm::{clean_corpus, CharMapping, CleaningReport, SentencePair};
pub use train::{
    average_checkpoints, load_checkpoint, lr_schedule, save_checkpoint, Checkpoint, TrainConfig, Trainer,
};
