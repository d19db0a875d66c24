#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use nmt_cli::config::{PipelineConfig, Profiles};
use nmt_cli::synth_text::{generate, join_lines, SynthTextSpec};

pub const TINY: &str = r#"
average_last = 2

[data]
src = "corpus.src"
tgt = "corpus.tgt"
tgt_lexicon = "corpus.tgt.lex"
holdout = 20
max_len = 40

[bpe]
src_merges = 60
tgt_merges = 30

[model]
enc_layers = 1
dec_layers = 1
d_model = 16
heads = 2
rel_clip = 4

[train]
warmup_steps = 10
token_budget = 300
micro_batch_tokens = 300
epochs = 2
save_interval_steps = 3

[decode]
beam = 2

[eval]
max_n = [4]
"#;

/// Writes a small synthetic corpus and the tiny config into `dir`.
pub fn tiny_setup(dir: &Path, pairs: usize) -> PathBuf {
    let text = generate(&SynthTextSpec {
        pairs,
        ..SynthTextSpec::default()
    });
    fs::write(dir.join("corpus.src"), join_lines(&text.src)).unwrap();
    fs::write(dir.join("corpus.tgt"), join_lines(&text.tgt)).unwrap();
    fs::write(dir.join("corpus.tgt.lex"), text.tgt_lexicon.join("\n") + "\n").unwrap();
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path
}

pub fn tiny_config(dir: &Path, pairs: usize) -> PipelineConfig {
    let path = tiny_setup(dir, pairs);
    PipelineConfig::load(Some(&path), Profiles::default()).unwrap()
}
