use serde::{Deserialize, Serialize};

use crate::model::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicBatch {
    /// Emit once cos(previous sum, new sum) reaches this value.
    pub threshold: f64,
    pub max_micro_batches: usize,
}

impl Default for DynamicBatch {
    fn default() -> Self {
        DynamicBatch {
            threshold: 0.9,
            max_micro_batches: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AccumulationMode {
    /// Emit when the accumulated target tokens reach the budget.
    Static { token_budget: usize },
    Dynamic(DynamicBatch),
}

/// A token-weighted gradient ready for the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Update {
    /// Per-token mean gradient over the accumulated micro-batches.
    pub grads: ParameterSet<f32>,
    pub tokens: usize,
    pub micro_batches: usize,
    /// Token-weighted mean loss.
    pub loss: f64,
    /// Cosine that triggered a dynamic update, if any.
    pub cosine: Option<f64>,
}

/// Sums `g_i · n_i` over micro-batches and decides when to emit an update.
#[derive(Debug, Clone)]
pub struct Accumulator {
    mode: AccumulationMode,
    sum: Option<ParameterSet<f64>>,
    tokens: usize,
    micro_batches: usize,
    loss_sum: f64,
}

fn dot(a: &ParameterSet<f64>, b: &ParameterSet<f64>) -> f64 {
    a.iter()
        .map(|(k, t)| {
            let u = b.get(k).expect("same parameter names");
            t.data().iter().zip(u.data()).map(|(x, y)| x * y).sum::<f64>()
        })
        .sum()
}

impl Accumulator {
    pub fn new(mode: AccumulationMode) -> Self {
        Accumulator {
            mode,
            sum: None,
            tokens: 0,
            micro_batches: 0,
            loss_sum: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.micro_batches == 0
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// Adds the per-token mean gradient of a micro-batch with `tokens` target
    /// tokens and mean loss `loss`.
    pub fn push(&mut self, grads: &ParameterSet<f32>, tokens: usize, loss: f64) -> Option<Update> {
        let w = tokens as f64;
        let prev = self.sum.clone();
        let sum = self.sum.get_or_insert_with(|| {
            ParameterSet::new(grads.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect())
        });
        for (name, g) in grads.iter() {
            let acc = sum.get_mut(name).expect("gradient names are stable");
            for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += w * x as f64;
            }
        }
        self.tokens += tokens;
        self.micro_batches += 1;
        self.loss_sum += w * loss;

        match self.mode {
            AccumulationMode::Static { token_budget } => (self.tokens >= token_budget).then(|| self.emit(None)),
            AccumulationMode::Dynamic(d) => {
                let cosine = prev.map(|p| {
                    let s = self.sum.as_ref().expect("just set");
                    let denom = (dot(&p, &p) * dot(s, s)).sqrt();
                    if denom > 0.0 {
                        dot(&p, s) / denom
                    } else {
                        0.0
                    }
                });
                let similar = cosine.is_some_and(|c| c >= d.threshold);
                (similar || self.micro_batches >= d.max_micro_batches).then(|| self.emit(cosine))
            }
        }
    }

    /// Emits whatever has been accumulated (end of training).
    pub fn flush(&mut self) -> Option<Update> {
        (!self.is_empty() && self.tokens > 0).then(|| self.emit(None))
    }

    fn emit(&mut self, cosine: Option<f64>) -> Update {
        let sum = self.sum.take().expect("non-empty accumulator");
        let n = self.tokens.max(1) as f64;
        let grads = ParameterSet::new(
            sum.iter()
                .map(|(k, t)| (k.clone(), t.map(|v| v / n).cast::<f32>()))
                .collect(),
        );
        let update = Update {
            grads,
            tokens: self.tokens,
            micro_batches: self.micro_batches,
            loss: self.loss_sum / n,
            cosine,
        };
        self.tokens = 0;
        self.micro_batches = 0;
        self.loss_sum = 0.0;
        update
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad(v: &[f32]) -> ParameterSet<f32> {
        let mut p = ParameterSet::default();
        p.insert("w", Tensor::new(&[v.len()], v.to_vec()).unwrap());
        p
    }

    #[test]
    fn static_budget() {
        let mut acc = Accumulator::new(AccumulationMode::Static { token_budget: 25_000 });
        assert!(acc.push(&grad(&[1.0]), 10_000, 1.0).is_none());
        assert!(acc.push(&grad(&[1.0]), 10_000, 1.0).is_none());
        let u = acc.push(&grad(&[1.0]), 6_000, 1.0).unwrap();
        assert_eq!((u.tokens, u.micro_batches), (26_000, 3));
        assert!(acc.is_empty());
    }

    #[test]
    fn oversized_micro_batch_emits_at_once() {
        let mut acc = Accumulator::new(AccumulationMode::Static { token_budget: 100 });
        let u = acc.push(&grad(&[2.0]), 500, 3.0).unwrap();
        assert_eq!(u.micro_batches, 1);
        assert_eq!(u.grads.get("w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn token_weighted_mean() {
        let mut acc = Accumulator::new(AccumulationMode::Static { token_budget: 4 });
        acc.push(&grad(&[1.0, 0.0]), 1, 2.0);
        let u = acc.push(&grad(&[4.0, 2.0]), 3, 6.0).unwrap();
        assert_eq!(u.grads.get("w").unwrap().data(), &[3.25, 1.5]);
        assert_eq!(u.loss, 5.0);
    }

    #[test]
    fn dynamic_identical_gradients_stop_after_two() {
        let mut acc = Accumulator::new(AccumulationMode::Dynamic(DynamicBatch::default()));
        assert!(acc.push(&grad(&[1.0, 2.0]), 10, 1.0).is_none());
        let u = acc.push(&grad(&[1.0, 2.0]), 10, 1.0).unwrap();
        assert_eq!(u.micro_batches, 2);
        assert!((u.cosine.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dynamic_cap() {
        let d = DynamicBatch { threshold: 0.999, max_micro_batches: 3 };
        let mut acc = Accumulator::new(AccumulationMode::Dynamic(d));
        assert!(acc.push(&grad(&[1.0, 0.0]), 1, 0.0).is_none());
        assert!(acc.push(&grad(&[0.0, 1.0]), 1, 0.0).is_none());
        assert_eq!(acc.push(&grad(&[-1.0, 0.0]), 1, 0.0).unwrap().micro_batches, 3);
    }
}
