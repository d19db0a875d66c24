/// Inverse square-root schedule with linear warmup:
/// `scale · d^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
///
/// `step` and `warmup` are clamped to at least 1.
pub fn lr_schedule(step: u64, d_model: usize, warmup: u64, scale: f64) -> f64 {
    let step = step.max(1) as f64;
    let warmup = warmup.max(1) as f64;
    scale * (d_model as f64).powf(-0.5) * step.powf(-0.5).min(step * warmup.powf(-1.5))
}
