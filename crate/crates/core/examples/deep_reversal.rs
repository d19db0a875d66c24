//! Trains a deep model on the synthetic reversal task and reports held-out
//! greedy token accuracy as it goes.
//!
//! cargo run --release --example deep_reversal -- [layers] [minutes] [lr_scale] [warmup] [budget]

use std::time::Instant;

use nmt_core::decode::greedy_token_accuracy;
use nmt_core::model::ModelConfig;
use nmt_core::synth::{self, SynthSpec, Task};
use nmt_core::train::{TrainConfig, Trainer};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let layers: usize = arg(1, 24);
    let minutes: f64 = arg(2, 30.0);
    let lr_scale: f64 = arg(3, 1.0);
    let warmup: u64 = arg(4, 300);
    let budget: usize = arg(5, 1000);
    let cfg = ModelConfig {
        enc_layers: layers,
        dec_layers: layers,
        d_model: 64,
        heads: 4,
        rel_clip: 16,
        dropout: 0.0,
        src_vocab: 32,
        tgt_vocab: 32,
        max_len: 32,
        ..ModelConfig::default()
    };
    let spec = SynthSpec {
        task: Task::Reverse,
        vocab: 32,
        min_len: 1,
        max_len: 10,
    };
    let train = synth::pairs(&spec, 5000, 1, 0);
    let held = synth::pairs(&spec, 200, 2, 5000);
    let tc = TrainConfig {
        warmup_steps: warmup,
        token_budget: budget,
        micro_batch_tokens: budget,
        lr_scale,
        label_smoothing: 0.1,
        seed: 3,
        epochs: 1000,
        save_interval_steps: u64::MAX,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(cfg.clone(), tc).unwrap();
    let start = Instant::now();
    loop {
        t.config.max_updates = Some(t.step() + 50);
        let s = t.run(&train, &[]).unwrap();
        let loss = s.updates.iter().map(|u| u.loss).sum::<f64>() / s.updates.len() as f64;
        let acc = greedy_token_accuracy(&t.params, &cfg, &held[..100]).unwrap();
        let mins = start.elapsed().as_secs_f64() / 60.0;
        println!("step {} epoch {} loss {loss:.4} acc {acc:.4} minutes {mins:.1}", t.step(), t.cursor.epoch);
        if acc >= 0.95 || mins > minutes {
            break;
        }
    }
}
