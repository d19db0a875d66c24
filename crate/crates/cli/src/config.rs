//! Pipeline configuration. Values are layered: built-in defaults, then the
//! optional profiles, then the user's TOML file, then `NMT_SEED`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use nmt_core::{Error, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::Value;

/// Small model and short schedule, for tests and demos.
pub const TOY_PROFILE: &str = include_str!("../data/toy.toml");

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "NMT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub src: PathBuf,
    pub tgt: PathBuf,
    /// Pairs held out from the end of the cleaned corpus for validation.
    pub holdout: usize,
    /// Longest side, in BPE tokens, kept for training.
    pub max_len: usize,
    /// Character mapping TSV; the built-in sample when absent.
    pub char_mapping: Option<PathBuf>,
    /// Extra named character references, "name<TAB>char" per line.
    pub entities: Option<PathBuf>,
    /// Word lists for segmenting unspaced text after cleaning.
    pub src_lexicon: Option<PathBuf>,
    pub tgt_lexicon: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            src: PathBuf::new(),
            tgt: PathBuf::new(),
            holdout: 1000,
            max_len: nmt_core::corpus::DEFAULT_MAX_LEN,
            char_mapping: None,
            entities: None,
            src_lexicon: None,
            tgt_lexicon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BpeConfig {
    pub src_merges: usize,
    pub tgt_merges: usize,
}

impl Default for BpeConfig {
    fn default() -> Self {
        BpeConfig {
            src_merges: 16_000,
            tgt_merges: 16_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub alpha: f64,
    pub threads: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 4,
            alpha: 1.0,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// One BLEU line per maximum n-gram order.
    pub max_n: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { max_n: vec![4, 5] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Number of most recent checkpoints averaged for decoding.
    pub average_last: usize,
    pub data: DataConfig,
    pub bpe: BpeConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            average_last: 5,
            data: DataConfig::default(),
            bpe: BpeConfig::default(),
            model: ModelConfig {
                d_model: 512,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Profiles {
    pub toy: bool,
    /// 24 encoder and 24 decoder layers.
    pub deep: bool,
}

const DEEP_PROFILE: &str = "[model]\nenc_layers = 24\ndec_layers = 24\n";

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
pub fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl PipelineConfig {
    /// Defaults, then profiles, then `file` (relative data paths resolve
    /// against the file's directory), then the seed override.
    pub fn load(file: Option<&Path>, profiles: Profiles) -> Result<Self> {
        let mut tree = Value::try_from(PipelineConfig::default()).context("serializing defaults")?;
        if profiles.deep {
            merge(&mut tree, toml::from_str(DEEP_PROFILE)?);
        }
        if profiles.toy {
            merge(&mut tree, toml::from_str(TOY_PROFILE).context("built-in toy profile")?);
        }
        let mut base = PathBuf::from(".");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut tree, user);
            if let Some(dir) = path.parent() {
                base = dir.to_path_buf();
            }
        }
        let mut cfg: PipelineConfig = tree.try_into().map_err(|e| Error::Config(e.to_string()))?;
        cfg.data.resolve_paths(&base)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.train.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={seed:?} is not an unsigned integer")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| -> Result<()> { Err(Error::Config(m).into()) };
        if self.average_last == 0 {
            return bad("average_last must be at least 1".into());
        }
        if self.data.max_len == 0 {
            return bad("data.max_len must be positive".into());
        }
        if self.decode.beam == 0 || self.decode.threads == 0 {
            return bad("decode.beam and decode.threads must be positive".into());
        }
        if !(self.decode.alpha >= 0.0) {
            return bad(format!("decode.alpha {} must be non-negative", self.decode.alpha));
        }
        if self.eval.max_n.is_empty() || self.eval.max_n.contains(&0) {
            return bad("eval.max_n needs at least one positive order".into());
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Model configuration for the given vocabulary sizes.
    pub fn model_for(&self, src_vocab: usize, tgt_vocab: usize) -> ModelConfig {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            max_len: self.model.max_len.max(self.data.max_len + 1),
            ..self.model.clone()
        }
    }

    pub fn require_data(&self) -> Result<()> {
        if self.data.src.as_os_str().is_empty() || self.data.tgt.as_os_str().is_empty() {
            bail!(Error::Config("data.src and data.tgt must be set".into()));
        }
        Ok(())
    }
}

impl DataConfig {
    fn resolve_paths(&mut self, base: &Path) -> Result<()> {
        let fix = |p: &mut PathBuf| -> Result<()> {
            if !p.as_os_str().is_empty() && p.is_relative() {
                *p = std::path::absolute(base.join(&*p))?;
            }
            Ok(())
        };
        fix(&mut self.src)?;
        fix(&mut self.tgt)?;
        for p in [&mut self.char_mapping, &mut self.entities, &mut self.src_lexicon, &mut self.tgt_lexicon]
            .into_iter()
            .flatten()
        {
            fix(p)?;
        }
        Ok(())
    }
}
