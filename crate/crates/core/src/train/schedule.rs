//! Warmup + half-cosine learning-rate schedule.

/// Learning rate at optimizer step `step`.
///
/// Linear warmup from 0 to `peak` over `warmup_steps`, then a half cosine
/// down to `min_lr` at `total_steps`; steps past the end stay at `min_lr`.
pub fn lr_at(step: usize, peak: f64, min_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return peak * step as f64 / warmup_steps as f64;
    }
    if step >= total_steps {
        return min_lr;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    min_lr + (peak - min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Steps per epoch when `n` samples are consumed `batch` at a time (last batch may be short).
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}
