use std::fs;

use nmt_core::model::{init_parameters, ModelConfig};
use nmt_core::synth::{self, SynthSpec, Task};
use nmt_core::tensor::Tensor;
use nmt_core::train::*;
use nmt_core::Error;

fn copy_model(seed_layers: usize) -> ModelConfig {
    ModelConfig {
        enc_layers: seed_layers,
        dec_layers: seed_layers,
        d_model: 32,
        heads: 4,
        rel_clip: 4,
        dropout: 0.1,
        src_vocab: 12,
        tgt_vocab: 12,
        max_len: 16,
        ..ModelConfig::default()
    }
}

fn copy_spec() -> SynthSpec {
    SynthSpec {
        task: Task::Copy,
        vocab: 12,
        min_len: 1,
        max_len: 8,
    }
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        warmup_steps: 50,
        token_budget: 60,
        epochs: 1000,
        save_interval_steps: 1_000_000,
        label_smoothing: 0.1,
        seed,
        micro_batch_tokens: 40,
        ..TrainConfig::default()
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn save_cadence_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    // one pair per micro-batch and one micro-batch per update: 12 updates
    let pairs: Vec<_> = synth::pairs(
        &SynthSpec {
            min_len: 3,
            max_len: 3,
            ..copy_spec()
        },
        12,
        0,
        0,
    );
    let cfg = TrainConfig {
        token_budget: 1,
        micro_batch_tokens: 4,
        epochs: 1,
        save_interval_steps: 5,
        ..quick_config(0)
    };
    let mut t = Trainer::new(copy_model(1), cfg).unwrap().with_out_dir(dir.path());
    let s = t.run(&pairs, &pairs[..4]).unwrap();
    let steps: Vec<u64> = s.checkpoints.iter().map(|(s, _)| *s).collect();
    assert_eq!(steps, vec![5, 10, 12]);
    assert_eq!(s.updates.len(), 12);
    for (step, path) in &s.checkpoints {
        assert!(path.ends_with(checkpoint_name(*step)));
        assert_eq!(load_checkpoint(path).unwrap().step, *step);
        assert!(checkpoint::optimizer_path(path).exists());
    }
    let metrics = fs::read_to_string(dir.path().join("metrics.tsv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step\tlr\tloss\ttokens");
    assert_eq!(lines.len(), 13);
    let cols: Vec<&str> = lines[1].split('\t').collect();
    assert_eq!(cols[0], "1");
    assert_eq!(cols[3], "4");
    let valid = fs::read_to_string(dir.path().join("valid.tsv")).unwrap();
    assert_eq!(valid.lines().count(), 4);
}

#[test]
fn dynamic_batching_runs() {
    let pairs = synth::pairs(&copy_spec(), 60, 1, 0);
    let cfg = TrainConfig {
        dynamic_batch: Some(DynamicBatch {
            threshold: 0.5,
            max_micro_batches: 3,
        }),
        max_updates: Some(8),
        ..quick_config(1)
    };
    let mut t = Trainer::new(copy_model(1), cfg).unwrap();
    let s = t.run(&pairs, &[]).unwrap();
    assert_eq!(s.updates.len(), 8);
    assert!(s.updates.iter().all(|u| (1..=3).contains(&u.micro_batches)));
    assert!(t.params.is_finite());
}

/// "Decreasing" is read as the mean loss of the last 20 of the first 200
/// updates being below the mean of the first 20; per-update losses are noisy.
#[test]
fn copy_task_loss_decreases_for_most_seeds() {
    let mut decreased = 0;
    let mut report = Vec::new();
    for seed in 0..10 {
        let pairs = synth::pairs(&copy_spec(), 400, seed, 0);
        let cfg = TrainConfig {
            max_updates: Some(200),
            ..quick_config(seed)
        };
        let mut t = Trainer::new(copy_model(2), cfg).unwrap();
        let s = t.run(&pairs, &[]).unwrap();
        let losses: Vec<f64> = s.updates.iter().map(|u| u.loss).collect();
        assert_eq!(losses.len(), 200);
        let (head, tail) = (mean(&losses[..20]), mean(&losses[180..]));
        report.push((seed, head, tail));
        if tail < head {
            decreased += 1;
        }
    }
    assert!(decreased >= 10, "{report:?}");
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let pairs = synth::pairs(&copy_spec(), 50, 5, 0);
    let base = TrainConfig {
        save_interval_steps: 7,
        ..quick_config(5)
    };
    let model = copy_model(1);

    let full = TrainConfig {
        max_updates: Some(17),
        ..base.clone()
    };
    let mut a = Trainer::new(model.clone(), full.clone()).unwrap();
    let whole: Vec<f64> = a.run(&pairs, &[]).unwrap().updates.iter().map(|u| u.loss).collect();

    let dir = tempfile::tempdir().unwrap();
    let mut b = Trainer::new(model, full.clone()).unwrap().with_out_dir(dir.path());
    let first = b
        .run_with(&pairs, &[], |u| if u.step == 7 { Control::Stop } else { Control::Continue })
        .unwrap();
    assert_eq!(first.checkpoints.last().unwrap().0, 7);
    let ckpt = &first.checkpoints.last().unwrap().1;
    let cursor = load_checkpoint(ckpt).unwrap().cursor.unwrap();
    assert!(cursor.batch > 0 || cursor.epoch > 0);

    let mut c = Trainer::resume(ckpt, full).unwrap();
    assert_eq!(c.step(), 7);
    let rest: Vec<f64> = c.run(&pairs, &[]).unwrap().updates.iter().map(|u| u.loss).collect();
    assert_eq!(rest.len(), 10);
    assert_eq!(&whole[7..], &rest[..]);
    assert_eq!(c.params, a.params);
}

#[test]
fn non_finite_loss_aborts_with_pair_ids() {
    let model = copy_model(1);
    let mut params = init_parameters::<f32>(&model, 0).unwrap();
    let w = params.get_mut("src_embed").unwrap();
    *w = Tensor::full(w.shape(), f32::NAN);
    let pairs = synth::pairs(&copy_spec(), 10, 0, 100);
    let mut t = Trainer::with_params(model, quick_config(0), params).unwrap();
    match t.run(&pairs, &[]) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("pair ids") && msg.contains("10"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_corpus_is_an_error() {
    let mut t = Trainer::new(copy_model(1), quick_config(0)).unwrap();
    assert!(matches!(t.run(&[], &[]), Err(Error::EmptyCorpus)));
}
