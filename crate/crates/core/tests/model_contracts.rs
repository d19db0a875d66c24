use std::cell::RefCell;

use nmt_core::corpus::TokenMatrix;
use nmt_core::model::{
    self, attention, attention_mask, init_parameters, Bound, ForwardOptions, LnStat, ModelConfig, ParameterSet, RelPos,
};
use nmt_core::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, v.to_vec()).unwrap()
}

#[test]
fn two_position_hand_oracle() {
    let g = Graph::<f64>::new();
    let q = g.constant(t(&[1, 1, 2, 2], &[0.5, -1.0, 1.5, 0.25]));
    let k = g.constant(t(&[1, 1, 2, 2], &[1.0, 0.5, -0.5, 2.0]));
    let v = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, -1.0]));
    let rel = RelPos {
        keys: g.constant(t(&[3, 2], &[0.1, 0.2, 0.0, -0.3, 0.4, 0.1])),
        values: g.constant(t(&[3, 2], &[0.5, 0.0, -0.2, 0.3, 0.0, 1.0])),
        clip: 1,
    };
    let out = attention(q, k, v, Some(rel), None, 0).unwrap().value();
    // Worked by hand (loops over i, j with the clipped table lookup).
    let want = [1.130614609067626, 1.9543574541565731, 1.7332464596629225, 1.5155650453154685];
    for (a, b) in out.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-5, "{out:?}");
    }
    let mask = attention_mask::<f64>(None, 1, 1, 2, 2, true, 0);
    let causal = attention(q, k, v, Some(rel), Some(&mask), 0).unwrap().value();
    assert!((causal.data()[0] - 0.8).abs() < 1e-12 && (causal.data()[1] - 2.3).abs() < 1e-12);
}

#[test]
fn single_position_returns_values() {
    let g = Graph::<f64>::new();
    let q = g.constant(t(&[1, 2, 1, 3], &[0.3, -2.0, 1.0, 4.0, 0.1, 0.0]));
    let kv = t(&[1, 2, 1, 3], &[9.0, 8.0, 7.0, 6.0, 5.0, 4.0]);
    let out = attention(q, g.constant(kv.clone()), g.constant(kv.clone()), None, None, 0).unwrap();
    assert_eq!(out.value(), kv);
}

#[test]
fn mask_shape_mismatch_is_an_error() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let bad = Tensor::zeros(&[1, 1, 2, 3]);
    assert!(attention(x, x, x, None, Some(&bad), 0).is_err());
}

#[test]
fn causal_mask_hides_later_keys() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rnd = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let q = rnd(&[1, 2, 4, 3]);
    let k = rnd(&[1, 2, 4, 3]);
    let v = rnd(&[1, 2, 4, 3]);
    let rk = rnd(&[5, 3]);
    let rv = rnd(&[5, 3]);
    let mask = attention_mask::<f64>(None, 1, 2, 4, 4, true, 0);
    let run = |k: &Tensor<f64>, v: &Tensor<f64>| {
        let g = Graph::<f64>::new();
        let rel = RelPos { keys: g.constant(rk.clone()), values: g.constant(rv.clone()), clip: 2 };
        attention(g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()), Some(rel), Some(&mask), 0)
            .unwrap()
            .value()
    };
    let base = run(&k, &v);
    let mut k2 = k.clone();
    let mut v2 = v.clone();
    for h in 0..2 {
        for pos in 1..4 {
            for c in 0..3 {
                k2.data_mut()[(h * 4 + pos) * 3 + c] += 5.0;
                v2.data_mut()[(h * 4 + pos) * 3 + c] -= 3.0;
            }
        }
    }
    let pert = run(&k2, &v2);
    for h in 0..2 {
        for c in 0..3 {
            assert_eq!(base.data()[h * 12 + c], pert.data()[h * 12 + c]);
        }
    }
    assert_ne!(base, pert);
}

#[test]
fn relative_positions_saturate_beyond_clip() {
    // Query 0, keys 5 and 8 are both clipped to +k = 2: swapping them is
    // invisible to that query.
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut rnd = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let (l, dh) = (10, 4);
    let q = rnd(&[1, 1, l, dh]);
    let k = rnd(&[1, 1, l, dh]);
    let v = rnd(&[1, 1, l, dh]);
    let rk = rnd(&[5, dh]);
    let rv = rnd(&[5, dh]);
    let swap = |x: &Tensor<f64>| {
        let mut y = x.clone();
        for c in 0..dh {
            y.data_mut().swap(5 * dh + c, 8 * dh + c);
        }
        y
    };
    let run = |k: Tensor<f64>, v: Tensor<f64>| {
        let g = Graph::<f64>::new();
        let rel = RelPos { keys: g.constant(rk.clone()), values: g.constant(rv.clone()), clip: 2 };
        attention(g.constant(q.clone()), g.constant(k), g.constant(v), Some(rel), None, 0).unwrap().value()
    };
    let a = run(k.clone(), v.clone());
    let b = run(swap(&k), swap(&v));
    for c in 0..dh {
        assert!((a.data()[c] - b.data()[c]).abs() < 1e-12);
    }
    // Query 6 sees key 5 at distance -1 and key 8 at +2, so it does notice.
    assert!((0..dh).any(|c| (a.data()[6 * dh + c] - b.data()[6 * dh + c]).abs() > 1e-6));
}

fn small_cfg() -> ModelConfig {
    ModelConfig {
        enc_layers: 2,
        dec_layers: 3,
        d_model: 16,
        heads: 4,
        rel_clip: 3,
        dropout: 0.3,
        src_vocab: 13,
        tgt_vocab: 11,
        max_len: 32,
        ..ModelConfig::default()
    }
}

fn logits(params: &ParameterSet<f64>, cfg: &ModelConfig, src: &TokenMatrix, tgt: &TokenMatrix) -> Tensor<f64> {
    let g = Graph::<f64>::new();
    let p = Bound::new(&g, params, false);
    model::forward(&p, cfg, src, tgt, &ForwardOptions::eval()).unwrap().value()
}

#[test]
fn forward_shape_and_determinism() {
    let cfg = small_cfg();
    let params = init_parameters::<f64>(&cfg, 4).unwrap();
    let src = TokenMatrix::from_rows(&[vec![4, 5, 6, 2], vec![7, 2], vec![8, 9, 2]]);
    let tgt = TokenMatrix::from_rows(&[vec![1, 4, 5], vec![1, 6], vec![1]]);
    let a = logits(&params, &cfg, &src, &tgt);
    assert_eq!(a.shape(), &[3, 3, 11]);
    assert_eq!(a, logits(&params, &cfg, &src, &tgt));
}

#[test]
fn dropout_changes_training_forward_only() {
    let cfg = small_cfg();
    let params = init_parameters::<f32>(&cfg, 4).unwrap();
    let src = TokenMatrix::from_rows(&[vec![4, 5, 6, 2]]);
    let tgt = TokenMatrix::from_rows(&[vec![1, 4, 5]]);
    let run = |opts: ForwardOptions| {
        let g = Graph::<f32>::new();
        let p = Bound::new(&g, &params, false);
        model::forward(&p, &cfg, &src, &tgt, &opts).unwrap().value()
    };
    let eval = run(ForwardOptions::eval());
    let tr1 = run(ForwardOptions::train(7, 1));
    assert_ne!(eval, tr1);
    assert_eq!(tr1, run(ForwardOptions::train(7, 1)));
    assert_ne!(tr1, run(ForwardOptions::train(7, 2)));
}

#[test]
fn trailing_padding_does_not_change_real_positions() {
    let cfg = small_cfg();
    let params = init_parameters::<f64>(&cfg, 5).unwrap();
    let src = TokenMatrix::from_rows(&[vec![4, 5, 6, 7, 2]]);
    let tgt = TokenMatrix::from_rows(&[vec![1, 8, 9, 10]]);
    let base = logits(&params, &cfg, &src, &tgt);
    let src_pad = TokenMatrix::from_rows(&[vec![4, 5, 6, 7, 2, 0, 0, 0]]);
    let tgt_pad = TokenMatrix::from_rows(&[vec![1, 8, 9, 10, 0, 0]]);
    let padded = logits(&params, &cfg, &src_pad, &tgt_pad);
    let v = cfg.tgt_vocab;
    for i in 0..4 * v {
        assert!((base.data()[i] - padded.data()[i]).abs() < 1e-5);
    }
    // Same check for a row padded because of a longer neighbour in the batch.
    let batch_src = TokenMatrix::from_rows(&[vec![4, 5, 6, 7, 2], vec![9, 9, 9, 9, 9, 9, 9, 9, 2]]);
    let batch_tgt = TokenMatrix::from_rows(&[vec![1, 8, 9, 10], vec![1, 4, 4, 4, 4, 4, 4]]);
    let batched = logits(&params, &cfg, &batch_src, &batch_tgt);
    for pos in 0..4 {
        for c in 0..v {
            assert!((base.data()[pos * v + c] - batched.data()[pos * v + c]).abs() < 1e-5);
        }
    }
}

#[test]
fn decoder_is_causal_in_target_embeddings() {
    let cfg = small_cfg();
    let params = init_parameters::<f64>(&cfg, 6).unwrap();
    let src = TokenMatrix::from_rows(&[vec![4, 5, 6, 2]]);
    let tgt = TokenMatrix::from_rows(&[vec![1, 4, 5, 6, 7]]);
    let base = logits(&params, &cfg, &src, &tgt);
    let v = cfg.tgt_vocab;
    for changed in 1..5 {
        let mut t2 = tgt.clone();
        t2.data[changed] = 10;
        let pert = logits(&params, &cfg, &src, &t2);
        for pos in 0..5 {
            let same = (0..v).all(|c| base.data()[pos * v + c] == pert.data()[pos * v + c]);
            assert_eq!(same, pos < changed, "changed {changed}, pos {pos}");
        }
    }
}

/// Counted from the block structure, independently of `parameter_specs`.
fn expected_count(layers: usize, d: usize, heads: usize, k: usize, vs: usize, vt: usize) -> usize {
    let attn = 4 * (d * d + d);
    let rel = 2 * (2 * k + 1) * (d / heads);
    let ffn = d * 4 * d + 4 * d + 4 * d * d + d;
    let ln = 2 * d;
    let enc = attn + rel + ffn + 2 * ln;
    let dec = 2 * attn + rel + ffn + 3 * ln;
    (vs + vt) * d + layers * (enc + dec)
}

#[test]
fn parameter_count_closed_form() {
    for (layers, d) in [(6, 256), (24, 512)] {
        let cfg = ModelConfig {
            enc_layers: layers,
            dec_layers: layers,
            d_model: d,
            heads: 4,
            rel_clip: 16,
            src_vocab: 8000,
            tgt_vocab: 6000,
            ..ModelConfig::default()
        };
        let count: usize = model::parameter_specs(&cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum();
        assert_eq!(count, expected_count(layers, d, 4, 16, 8000, 6000));
    }
    // Literal values for the two reference configurations.
    assert_eq!(expected_count(6, 256, 4, 16, 8000, 6000), 14_693_888);
    assert_eq!(expected_count(24, 512, 4, 16, 8000, 6000), 184_127_488);
}

fn deep_cfg(residual_scaling: bool) -> ModelConfig {
    ModelConfig {
        enc_layers: 24,
        dec_layers: 24,
        d_model: 64,
        heads: 4,
        rel_clip: 16,
        dropout: 0.0,
        src_vocab: 40,
        tgt_vocab: 40,
        max_len: 64,
        residual_scaling,
        ..ModelConfig::default()
    }
}

fn random_batch(seed: u64) -> (TokenMatrix, TokenMatrix, TokenMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Vec::new();
    let mut tin = Vec::new();
    let mut tout = Vec::new();
    for _ in 0..8 {
        let ls = rng.gen_range(4..12);
        let lt = rng.gen_range(4..12);
        let mut s: Vec<u32> = (0..ls).map(|_| rng.gen_range(4..40)).collect();
        s.push(2);
        let y: Vec<u32> = (0..lt).map(|_| rng.gen_range(4..40)).collect();
        tin.push(std::iter::once(1).chain(y.iter().copied()).collect());
        tout.push(y.iter().copied().chain(std::iter::once(2)).collect());
        src.push(s);
    }
    (TokenMatrix::from_rows(&src), TokenMatrix::from_rows(&tin), TokenMatrix::from_rows(&tout))
}

#[test]
fn ln_inputs_stay_in_range_at_init_for_24_layers() {
    let cfg = deep_cfg(true);
    let params = init_parameters::<f32>(&cfg, 11).unwrap();
    let (src, tin, _) = random_batch(3);
    let probe = RefCell::new(Vec::<LnStat>::new());
    let opts = ForwardOptions { probe: Some(&probe), ..ForwardOptions::eval() };
    let g = Graph::<f32>::new();
    let p = Bound::new(&g, &params, false);
    model::forward(&p, &cfg, &src, &tin, &opts).unwrap();
    let stats = probe.into_inner();
    assert_eq!(stats.len(), 24 * 2 + 24 * 3);
    for s in &stats {
        assert!(s.min_dim_std >= 0.1 && s.max_dim_std <= 2.0, "{s:?}");
    }
}

fn gradient_ratio(residual_scaling: bool) -> f64 {
    let cfg = deep_cfg(residual_scaling);
    let params = init_parameters::<f32>(&cfg, 11).unwrap();
    let (src, tin, tout) = random_batch(3);
    let g = Graph::<f32>::new();
    let p = Bound::new(&g, &params, true);
    let loss = model::loss(&p, &cfg, &src, &tin, &tout, 0.1, &ForwardOptions::eval()).unwrap();
    let vars = p.bound_vars();
    let grads = g.backward(loss).unwrap();
    let norm_of = |pred: &dyn Fn(&str) -> bool| -> f64 {
        vars.iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, v)| grads.get_or_zeros(*v).norm().powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let emb = norm_of(&|n| n == "src_embed");
    let top = norm_of(&|n| n.starts_with("dec.23.ffn."));
    emb / top
}

#[test]
fn residual_scaling_keeps_gradients_flowing_to_the_bottom() {
    let scaled = gradient_ratio(true);
    let plain = gradient_ratio(false);
    eprintln!("gradient ratio: scaled {scaled:.4e}, unscaled {plain:.4e}");
    assert!(scaled >= 1e-2, "scaled ratio {scaled}");
    assert!(plain < scaled, "unscaled {plain} vs scaled {scaled}");
}
