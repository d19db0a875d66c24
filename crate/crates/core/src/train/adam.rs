use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter plus the update count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterSet<f32>,
    pub v: ParameterSet<f32>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParameterSet<f32>) -> Self {
        let zeros: ParameterSet<f32> = ParameterSet::new(
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        );
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient entry was NaN or infinite, or the update would overflow;
    /// nothing was changed.
    SkippedNonFinite,
}

/// One bias-corrected Adam update. Parameters, gradients and state must
/// share names and shapes.
pub fn adam_step(
    params: &mut ParameterSet<f32>,
    grads: &ParameterSet<f32>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<StepOutcome> {
    for (name, p) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Data(format!("no gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    if !grads.is_finite() {
        log::warn!("skipping update {}: non-finite gradient", state.t + 1);
        return Ok(StepOutcome::SkippedNonFinite);
    }
    let t = state.t + 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut staged = Vec::with_capacity(params.len());
    for (name, p) in params.iter() {
        let g = grads.get(name).expect("checked above").data();
        let missing = || Error::Data(format!("no Adam state for {name}"));
        let m = state.m.get(name).ok_or_else(missing)?.data();
        let v = state.v.get(name).ok_or_else(missing)?.data();
        let n = p.numel();
        let (mut w1, mut m1, mut v1) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for (i, &w) in p.data().iter().enumerate() {
            let gi = g[i] as f64;
            let mi = b1 * m[i] as f64 + (1.0 - b1) * gi;
            let vi = b2 * v[i] as f64 + (1.0 - b2) * gi * gi;
            let delta = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            w1.push((w as f64 - delta) as f32);
            m1.push(mi as f32);
            v1.push(vi as f32);
        }
        let finite = |x: &[f32]| x.iter().all(|v| v.is_finite());
        if !(finite(&w1) && finite(&m1) && finite(&v1)) {
            log::warn!("skipping update {t}: {name} would become non-finite");
            return Ok(StepOutcome::SkippedNonFinite);
        }
        staged.push((name.clone(), w1, m1, v1));
    }
    for (name, w1, m1, v1) in staged {
        params.get_mut(&name).expect("staged from params").data_mut().copy_from_slice(&w1);
        state.m.get_mut(&name).expect("checked").data_mut().copy_from_slice(&m1);
        state.v.get_mut(&name).expect("checked").data_mut().copy_from_slice(&v1);
    }
    state.t = t;
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(name: &str, v: f32) -> ParameterSet<f32> {
        let mut p = ParameterSet::default();
        p.insert(name, Tensor::new(&[1], vec![v]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_from_fresh_state_changes_nothing() {
        let mut p = scalar_set("w", 0.7);
        let mut st = AdamState::zeros_like(&p);
        adam_step(&mut p, &scalar_set("w", 0.0), &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = scalar_set("w", 0.7);
        let mut st = AdamState::zeros_like(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &scalar_set("w", 1.0), &mut st, 0.1, &cfg).unwrap();
        let (m1, v1) = (st.m.get("w").unwrap().data()[0], st.v.get("w").unwrap().data()[0]);
        adam_step(&mut p, &scalar_set("w", 0.0), &mut st, 0.1, &cfg).unwrap();
        assert!((st.m.get("w").unwrap().data()[0] - 0.9 * m1).abs() < 1e-7);
        assert!((st.v.get("w").unwrap().data()[0] - 0.98 * v1).abs() < 1e-7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0f32, -0.02, 1e-3] {
            let mut p = scalar_set("w", 1.0);
            let mut st = AdamState::zeros_like(&p);
            adam_step(&mut p, &scalar_set("w", g), &mut st, 0.01, &AdamConfig::default()).unwrap();
            let moved = p.get("w").unwrap().data()[0] - 1.0;
            let want = -0.01 * g as f64 / (g.abs() as f64 + 1e-9);
            assert!((moved as f64 - want).abs() < 1e-6, "g={g}");
        }
    }

    #[test]
    fn non_finite_gradients_are_skipped() {
        let mut p = scalar_set("w", 1.0);
        let mut st = AdamState::zeros_like(&p);
        let out = adam_step(&mut p, &scalar_set("w", f32::NAN), &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(out, StepOutcome::SkippedNonFinite);
        assert_eq!(st.t, 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }
}
