//! Optimizer, gradient accumulation, checkpoints and the training loop.

mod accumulate;
mod adam;
pub mod checkpoint;
mod schedule;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use accumulate::{AccumulationMode, Accumulator, DynamicBatch, Update};
pub use adam::{adam_step, AdamConfig, AdamState, StepOutcome};
pub use checkpoint::{
    average_checkpoints, inspect, load_checkpoint, load_tensors, save_checkpoint, save_tensors, Checkpoint, Cursor,
    RecordHeader,
};
pub use schedule::lr_schedule;

use crate::corpus::{make_batches, EncodedPair, MicroBatch};
use crate::error::{Error, Result};
use crate::model::{self, Bound, ForwardOptions, ModelConfig, ParameterSet};
use crate::seed;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub warmup_steps: u64,
    /// Target tokens per optimizer update (static accumulation).
    pub token_budget: usize,
    pub epochs: u64,
    pub save_interval_steps: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lr_scale: f64,
    /// Gradient-direction batch sizing; replaces the token budget when set.
    pub dynamic_batch: Option<DynamicBatch>,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Padded target tokens per forward/backward pass.
    pub micro_batch_tokens: usize,
    /// Stop once this many updates have been applied.
    pub max_updates: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 8000,
            token_budget: 25_000,
            epochs: 128,
            save_interval_steps: 1500,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            lr_scale: 1.0,
            dynamic_batch: None,
            label_smoothing: 0.1,
            seed: 1,
            micro_batch_tokens: 4096,
            max_updates: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if self.token_budget < 1 || self.micro_batch_tokens < 1 {
            return bad("token budgets must be positive");
        }
        if self.epochs < 1 || self.save_interval_steps < 1 {
            return bad("epochs and save_interval_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) || !(self.lr_scale > 0.0) {
            return bad("adam_eps and lr_scale must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label_smoothing must lie in [0, 1)");
        }
        if let Some(d) = self.dynamic_batch {
            if !(d.threshold > 0.0 && d.threshold < 1.0) {
                return bad("dynamic_batch.threshold must lie in (0, 1)");
            }
            if d.max_micro_batches < 1 {
                return bad("dynamic_batch.max_micro_batches must be positive");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn accumulation(&self) -> AccumulationMode {
        match self.dynamic_batch {
            Some(d) => AccumulationMode::Dynamic(d),
            None => AccumulationMode::Static {
                token_budget: self.token_budget,
            },
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Gradient of one micro-batch's per-token mean loss.
#[derive(Debug, Clone)]
pub struct MicroGrad {
    pub grads: ParameterSet<f32>,
    pub loss: f64,
    pub tokens: usize,
}

pub fn micro_batch_gradients(
    params: &ParameterSet<f32>,
    cfg: &ModelConfig,
    batch: &MicroBatch,
    smoothing: f64,
    opts: &ForwardOptions<'_>,
) -> Result<MicroGrad> {
    let g = Graph::new();
    let bound = Bound::new(&g, params, true);
    let loss = model::loss(&bound, cfg, &batch.src, &batch.tgt_in, &batch.tgt_out, smoothing, opts)?;
    let value = loss.value().item() as f64;
    let grads = g.backward(loss)?;
    let mut out = ParameterSet::default();
    for (name, var) in bound.bound_vars() {
        out.insert(name, grads.get_or_zeros(var));
    }
    for (name, t) in params.iter() {
        if out.get(name).is_none() {
            out.insert(name.clone(), Tensor::zeros(t.shape()));
        }
    }
    Ok(MicroGrad {
        grads: out,
        loss: value,
        tokens: batch.target_tokens(),
    })
}

/// Token-weighted mean negative log-likelihood without smoothing or dropout.
pub fn evaluate_loss(params: &ParameterSet<f32>, cfg: &ModelConfig, pairs: &[EncodedPair], micro_batch_tokens: usize) -> Result<f64> {
    let batches = make_batches(pairs, micro_batch_tokens, 0, 0);
    let (mut sum, mut tokens) = (0.0, 0usize);
    for b in &batches.batches {
        let g = Graph::new();
        let bound = Bound::new(&g, params, false);
        let l = model::loss(&bound, cfg, &b.src, &b.tgt_in, &b.tgt_out, 0.0, &ForwardOptions::eval())?;
        let n = b.target_tokens();
        sum += l.value().item() as f64 * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(sum / tokens as f64)
}

/// One applied optimizer update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: f64,
    pub tokens: usize,
    pub micro_batches: usize,
    pub tokens_per_sec: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub updates: Vec<UpdateRecord>,
    pub checkpoints: Vec<(u64, PathBuf)>,
    pub valid_losses: Vec<(u64, f64)>,
    pub skipped_updates: usize,
}

pub struct Trainer {
    pub model_config: ModelConfig,
    pub config: TrainConfig,
    pub params: ParameterSet<f32>,
    pub adam: AdamState,
    pub cursor: Cursor,
    out_dir: Option<PathBuf>,
}

pub fn checkpoint_name(step: u64) -> String {
    format!("checkpoint_{step:08}.nmtc")
}

fn append_line(path: &Path, header: &str, line: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f: File = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if fresh {
        writeln!(f, "{header}").map_err(|e| Error::io(path, e))?;
    }
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

impl Trainer {
    /// Fresh parameters initialized from `config.seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self> {
        let params = model::init_parameters(&model_config, config.seed)?;
        Self::with_params(model_config, config, params)
    }

    pub fn with_params(model_config: ModelConfig, config: TrainConfig, params: ParameterSet<f32>) -> Result<Self> {
        model_config.validate()?;
        config.validate()?;
        params.check_against(&model_config)?;
        let adam = AdamState::zeros_like(&params);
        Ok(Trainer {
            model_config,
            config,
            params,
            adam,
            cursor: Cursor::default(),
            out_dir: None,
        })
    }

    /// Restores parameters, optimizer state and data position from a
    /// checkpoint written by [`Trainer::run`].
    pub fn resume(path: &Path, config: TrainConfig) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.train_digest != config.digest() {
            log::warn!("{}: training configuration differs from the one that wrote it", path.display());
        }
        let mut t = Self::with_params(ckpt.model_config, config, ckpt.params)?;
        let optim = load_tensors(&checkpoint::optimizer_path(path))?;
        for (name, p) in t.params.iter() {
            for (prefix, set) in [("m.", &mut t.adam.m), ("v.", &mut t.adam.v)] {
                let key = format!("{prefix}{name}");
                let s = optim.get(&key).ok_or_else(|| Error::CorruptCheckpoint {
                    path: checkpoint::optimizer_path(path),
                    detail: format!("missing {key}"),
                })?;
                if s.shape() != p.shape() {
                    return Err(Error::CorruptCheckpoint {
                        path: checkpoint::optimizer_path(path),
                        detail: format!("{key}: shape {:?}, expected {:?}", s.shape(), p.shape()),
                    });
                }
                set.insert(name.clone(), s.clone());
            }
        }
        t.adam.t = ckpt.step;
        t.cursor = ckpt.cursor.unwrap_or_default();
        Ok(t)
    }

    /// Directory for checkpoints, `metrics.tsv` and `valid.tsv`.
    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn step(&self) -> u64 {
        self.adam.t
    }

    fn save(&self, valid: &[EncodedPair], summary: &mut TrainSummary) -> Result<()> {
        let step = self.step();
        let Some(dir) = &self.out_dir else {
            return Ok(());
        };
        let path = dir.join(checkpoint_name(step));
        save_checkpoint(
            &Checkpoint {
                params: self.params.clone(),
                step,
                model_config: self.model_config.clone(),
                train_digest: self.config.digest(),
                cursor: Some(self.cursor),
            },
            &path,
        )?;
        let mut optim = ParameterSet::default();
        for (prefix, set) in [("m.", &self.adam.m), ("v.", &self.adam.v)] {
            for (name, t) in set.iter() {
                optim.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        save_tensors(&checkpoint::optimizer_path(&path), &optim)?;
        log::info!("saved {}", path.display());
        summary.checkpoints.push((step, path));
        if !valid.is_empty() {
            let v = evaluate_loss(&self.params, &self.model_config, valid, self.config.micro_batch_tokens)?;
            log::info!("step {step}: validation loss {v:.4}");
            append_line(&dir.join("valid.tsv"), "step\tvalid_loss", &format!("{step}\t{v}"))?;
            summary.valid_losses.push((step, v));
        }
        Ok(())
    }

    fn apply(
        &mut self,
        u: Update,
        epoch: u64,
        started: &mut Instant,
        valid: &[EncodedPair],
        summary: &mut TrainSummary,
        hook: &mut dyn FnMut(&UpdateRecord) -> Control,
    ) -> Result<Control> {
        let lr = lr_schedule(
            self.adam.t + 1,
            self.model_config.d_model,
            self.config.warmup_steps,
            self.config.lr_scale,
        );
        match adam_step(&mut self.params, &u.grads, &mut self.adam, lr, &self.config.adam())? {
            StepOutcome::SkippedNonFinite => {
                summary.skipped_updates += 1;
                return Ok(Control::Continue);
            }
            StepOutcome::Applied => {}
        }
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        *started = Instant::now();
        let rec = UpdateRecord {
            step: self.step(),
            epoch,
            lr,
            loss: u.loss,
            tokens: u.tokens,
            micro_batches: u.micro_batches,
            tokens_per_sec: u.tokens as f64 / elapsed,
        };
        log::debug!(
            "step {} lr {:.3e} loss {:.4} tokens {} ({:.0} tok/s)",
            rec.step,
            rec.lr,
            rec.loss,
            rec.tokens,
            rec.tokens_per_sec
        );
        if let Some(dir) = &self.out_dir {
            append_line(
                &dir.join("metrics.tsv"),
                "step\tlr\tloss\ttokens",
                &format!("{}\t{}\t{}\t{}", rec.step, rec.lr, rec.loss, rec.tokens),
            )?;
        }
        let mut control = hook(&rec);
        summary.updates.push(rec);
        if self.config.max_updates.is_some_and(|m| self.step() >= m) {
            control = Control::Stop;
        }
        if self.step().is_multiple_of(self.config.save_interval_steps) {
            self.save(valid, summary)?;
        }
        Ok(control)
    }

    pub fn run(&mut self, train: &[EncodedPair], valid: &[EncodedPair]) -> Result<TrainSummary> {
        self.run_with(train, valid, |_| Control::Continue)
    }

    /// Trains until `epochs` passes, `max_updates`, or `hook` returns
    /// [`Control::Stop`]. A checkpoint is written every
    /// `save_interval_steps` updates and after the last one.
    pub fn run_with(
        &mut self,
        train: &[EncodedPair],
        valid: &[EncodedPair],
        mut hook: impl FnMut(&UpdateRecord) -> Control,
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if let Some(dir) = &self.out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut summary = TrainSummary::default();
        let mut acc = Accumulator::new(self.config.accumulation());
        let mut started = Instant::now();
        let start = self.cursor;
        let mut stopped = self.config.max_updates.is_some_and(|m| self.step() >= m);
        let mut epoch = start.epoch;
        while !stopped && epoch < self.config.epochs {
            let batches = make_batches(train, self.config.micro_batch_tokens, self.config.seed, epoch);
            if batches.batches.is_empty() {
                return Err(Error::Data("no training pair fits in a micro-batch".into()));
            }
            let epoch_seed = seed::derive_seed(&[self.config.seed, epoch]);
            let first = if epoch == start.epoch { start.batch } else { 0 };
            let n = batches.batches.len();
            for (bi, b) in batches.batches.iter().enumerate().skip(first) {
                let opts = ForwardOptions::train(epoch_seed, bi as u64);
                let mg = micro_batch_gradients(&self.params, &self.model_config, b, self.config.label_smoothing, &opts)?;
                if !mg.loss.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss at step {} (epoch {epoch}, batch {bi}); pair ids {:?}",
                        self.step() + 1,
                        b.pair_ids
                    )));
                }
                if let Some(u) = acc.push(&mg.grads, mg.tokens, mg.loss) {
                    self.cursor = if bi + 1 == n {
                        Cursor { epoch: epoch + 1, batch: 0 }
                    } else {
                        Cursor { epoch, batch: bi + 1 }
                    };
                    if self.apply(u, epoch, &mut started, valid, &mut summary, &mut hook)? == Control::Stop {
                        stopped = true;
                        break;
                    }
                }
            }
            epoch += 1;
        }
        if !stopped {
            if let Some(u) = acc.flush() {
                self.cursor = Cursor {
                    epoch: self.config.epochs,
                    batch: 0,
                };
                self.apply(u, self.config.epochs.saturating_sub(1), &mut started, valid, &mut summary, &mut hook)?;
            }
        }
        let last_saved = summary.checkpoints.last().map(|(s, _)| *s);
        if !summary.updates.is_empty() && last_saved != Some(self.step()) {
            self.save(valid, &mut summary)?;
        }
        Ok(summary)
    }
}
