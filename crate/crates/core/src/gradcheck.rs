//! Central finite-difference checks of the tape, for single ops and for the
//! full model loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::TokenMatrix;
use crate::error::Result;
use crate::model::{self, attention, attention_mask, init_parameters, Bound, ForwardOptions, ModelConfig, ParameterSet, RelPos};
use crate::tensor::{Graph, Real, Tensor, Var};

pub type Build<T> = dyn for<'g> Fn(&'g Graph<T>, &[Var<'g, T>]) -> Var<'g, T>;

pub fn random<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::from_f64c(rng.gen_range(-1.0..1.0)))
}

/// Loss is `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn eval_loss<T: Real>(inputs: &[Tensor<T>], build: &Build<T>, weights: &mut Option<Tensor<T>>) -> (f64, Vec<Tensor<T>>) {
    let g = Graph::<T>::new();
    let vars: Vec<Var<'_, T>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&g, &vars);
    let loss = if out.shape().is_empty() {
        out
    } else {
        let w = weights
            .get_or_insert_with(|| random(&mut ChaCha8Rng::seed_from_u64(99), &out.shape()))
            .clone();
        out.mul(&g.constant(w)).expect("weights match the output").sum()
    };
    let value = loss.value().item().as_f64();
    let grads = g.backward(loss).expect("scalar loss");
    (value, vars.iter().map(|v| grads.get_or_zeros(*v)).collect())
}

/// Norm-wise relative error between analytic and numeric gradients over every
/// input coordinate.
pub fn op_error<T: Real>(inputs: Vec<Tensor<T>>, eps: f64, build: &Build<T>) -> f64 {
    let mut weights = None;
    let (_, analytic) = eval_loss(&inputs, build, &mut weights);
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (which, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.clone();
            plus[which].data_mut()[i] += T::from_f64c(eps);
            let mut minus = inputs.clone();
            minus[which].data_mut()[i] -= T::from_f64c(eps);
            let numeric = (eval_loss(&plus, build, &mut weights).0 - eval_loss(&minus, build, &mut weights).0) / (2.0 * eps);
            let a = analytic[which].data()[i].as_f64();
            diff += (a - numeric).powi(2);
            norm += numeric.powi(2);
        }
    }
    diff.sqrt() / norm.sqrt().max(1e-12)
}

/// Checks every differentiable op on small random inputs.
/// Returns `(op name, norm-wise relative error)` pairs.
pub fn op_suite<T: Real>(eps: f64, seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut r = |shape: &[usize]| random::<T>(&mut rng, shape);

    let ab = vec![r(&[2, 3, 4]), r(&[3, 1])];
    out.push(("add", op_error(ab.clone(), eps, &|_, v| v[0].add(&v[1]).unwrap())));
    out.push(("sub", op_error(ab.clone(), eps, &|_, v| v[0].sub(&v[1]).unwrap())));
    out.push(("mul", op_error(ab, eps, &|_, v| v[0].mul(&v[1]).unwrap())));
    out.push(("scale", op_error(vec![r(&[5])], eps, &|_, v| v[0].scale(T::from_f64c(-2.5)))));
    out.push(("matmul", op_error(vec![r(&[2, 4, 5]), r(&[5, 3])], eps, &|_, v| v[0].matmul(&v[1]).unwrap())));
    out.push(("matmul_t", op_error(vec![r(&[2, 3, 4, 5]), r(&[6, 5])], eps, &|_, v| v[0].matmul_t(&v[1]).unwrap())));
    out.push((
        "matmul_ex",
        op_error(vec![r(&[3, 5, 4]), r(&[3, 5, 2])], eps, &|_, v| v[0].matmul_ex(&v[1], true, false).unwrap()),
    ));
    out.push(("reshape", op_error(vec![r(&[2, 6])], eps, &|_, v| v[0].reshape(&[3, 4]).unwrap())));
    out.push(("permute", op_error(vec![r(&[2, 3, 4])], eps, &|_, v| v[0].permute(&[2, 0, 1]).unwrap())));
    out.push(("softmax", op_error(vec![r(&[3, 4, 5])], eps, &|_, v| v[0].softmax(1).unwrap())));
    out.push((
        "layer_norm",
        op_error(vec![r(&[3, 6]), r(&[6]), r(&[6])], eps, &|_, v| {
            v[0].layer_norm(&v[1], &v[2], T::from_f64c(1e-6)).unwrap()
        }),
    ));
    out.push(("gelu", op_error(vec![r(&[12]).map(|x| x * T::from_f64c(3.0))], eps, &|_, v| v[0].gelu())));
    out.push((
        "dropout",
        op_error(vec![r(&[20])], eps, &|_, v| {
            let mut fixed = ChaCha8Rng::seed_from_u64(10);
            v[0].dropout(0.5, true, &mut fixed).unwrap()
        }),
    ));
    out.push(("embedding", op_error(vec![r(&[6, 4])], eps, &|_, v| v[0].embedding(&[1, 5, 1, 0]).unwrap())));
    let idx = Arc::new(vec![0, 2, 2, 1, 1, 0]);
    let i2 = idx.clone();
    out.push(("gather_last", op_error(vec![r(&[2, 2, 3])], eps, &move |_, v| v[0].gather_last(i2.clone(), 3).unwrap())));
    out.push(("scatter_last", op_error(vec![r(&[2, 2, 3])], eps, &move |_, v| v[0].scatter_last(idx.clone(), 4).unwrap())));
    out.push(("sum", op_error(vec![r(&[7])], eps, &|_, v| v[0].sum())));
    out.push((
        "cross_entropy",
        op_error(vec![r(&[5, 8]).map(|x| x * T::from_f64c(3.0))], eps, &|_, v| {
            v[0].cross_entropy(&[3, 0, 7, 0, 1], 0.1, 0).unwrap()
        }),
    ));
    let mask = attention_mask::<T>(Some((&[false, false, false, false, true], 5)), 1, 2, 3, 5, true, 1);
    out.push((
        "attention",
        op_error(
            vec![r(&[1, 2, 3, 4]), r(&[1, 2, 5, 4]), r(&[1, 2, 5, 4]), r(&[5, 4]), r(&[5, 4])],
            eps,
            &move |_, v| {
                let rel = RelPos {
                    keys: v[3],
                    values: v[4],
                    clip: 2,
                };
                attention(v[0], v[1], v[2], Some(rel), Some(&mask), 1).unwrap()
            },
        ),
    ));
    out
}

/// Result of a sampled whole-model check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelCheck {
    /// Largest per-coordinate |a - n| / max(|a|, |n|, 1e-4).
    pub worst: f64,
    pub normwise: f64,
    pub checked: usize,
    pub tensors: usize,
}

/// A fixed two-sentence batch valid for any vocabulary of at least 10.
pub fn sample_batch() -> (TokenMatrix, TokenMatrix, TokenMatrix) {
    let src = TokenMatrix::from_rows(&[vec![4, 5, 6, 7, 8, 2], vec![9, 4, 2]]);
    let tgt_in = TokenMatrix::from_rows(&[vec![1, 5, 6, 7, 8], vec![1, 4, 5]]);
    let tgt_out = TokenMatrix::from_rows(&[vec![5, 6, 7, 8, 2], vec![4, 5, 2]]);
    (src, tgt_in, tgt_out)
}

fn model_loss<T: Real>(params: &ParameterSet<T>, cfg: &ModelConfig) -> f64 {
    let (src, tgt_in, tgt_out) = sample_batch();
    let g = Graph::<T>::new();
    let p = Bound::new(&g, params, false);
    model::loss(&p, cfg, &src, &tgt_in, &tgt_out, 0.1, &ForwardOptions::eval())
        .expect("valid batch")
        .value()
        .item()
        .as_f64()
}

/// Compares the tape against central differences on `coords` coordinates,
/// spread round-robin over every parameter tensor.
pub fn model_check<T: Real>(cfg: &ModelConfig, seed: u64, coords: usize, eps: f64) -> Result<ModelCheck> {
    let params = init_parameters::<T>(cfg, seed)?;
    let (src, tgt_in, tgt_out) = sample_batch();
    let g = Graph::<T>::new();
    let p = Bound::new(&g, &params, true);
    let loss = model::loss(&p, cfg, &src, &tgt_in, &tgt_out, 0.1, &ForwardOptions::eval())?;
    let vars = p.bound_vars();
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut picks = Vec::with_capacity(coords);
    for k in 0..coords {
        let (name, var) = &vars[k % vars.len()];
        let n = params.get(name).expect("bound").numel();
        picks.push((name.clone(), *var, rng.gen_range(0..n)));
    }
    let (mut worst, mut diff, mut norm) = (0.0f64, 0.0, 0.0);
    for (name, var, i) in &picks {
        let mut plus = params.clone();
        plus.get_mut(name).expect("bound").data_mut()[*i] += T::from_f64c(eps);
        let mut minus = params.clone();
        minus.get_mut(name).expect("bound").data_mut()[*i] -= T::from_f64c(eps);
        let numeric = (model_loss(&plus, cfg) - model_loss(&minus, cfg)) / (2.0 * eps);
        let a = grads.get_or_zeros(*var).data()[*i].as_f64();
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        diff += (a - numeric).powi(2);
        norm += numeric.powi(2);
    }
    Ok(ModelCheck {
        worst,
        normwise: diff.sqrt() / norm.sqrt().max(1e-12),
        checked: picks.len(),
        tensors: vars.len().min(coords),
    })
}

/// ‖∂L/∂src_embed‖ / ‖∂L/∂(top decoder feed-forward)‖ at initialization.
pub fn gradient_norm_ratio(cfg: &ModelConfig, seed: u64, batch: &(TokenMatrix, TokenMatrix, TokenMatrix)) -> Result<f64> {
    let params = init_parameters::<f32>(cfg, seed)?;
    let g = Graph::<f32>::new();
    let p = Bound::new(&g, &params, true);
    let loss = model::loss(&p, cfg, &batch.0, &batch.1, &batch.2, 0.1, &ForwardOptions::eval())?;
    let vars = p.bound_vars();
    let grads = g.backward(loss)?;
    let top = format!("dec.{}.ffn.", cfg.dec_layers.saturating_sub(1));
    let norm_of = |pred: &dyn Fn(&str) -> bool| -> f64 {
        vars.iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, v)| grads.get_or_zeros(*v).norm().powi(2))
            .sum::<f64>()
            .sqrt()
    };
    Ok(norm_of(&|n| n == "src_embed") / norm_of(&|n| n.starts_with(&top)))
}
