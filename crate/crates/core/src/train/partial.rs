//! Reduced-label fine-tuning: every N-th frame of each subject, trained for
//! proportionally longer.

use crate::data::{subsample_every_n, Manifest};

use super::config::TrainConfig;
use super::TrainError;

/// Supported label fractions as `(fraction, epochs)`.
pub const PARTIAL_SCHEDULES: [(f64, usize); 5] = [(0.1, 200), (0.01, 2000), (0.005, 4000), (0.002, 10000), (0.001, 20000)];

/// `(N, epochs)` for a supported label fraction, with `N = round(1/fraction)`.
pub fn partial_schedule(fraction: f64) -> Result<(usize, usize), TrainError> {
    PARTIAL_SCHEDULES
        .iter()
        .find(|(f, _)| (f - fraction).abs() < 1e-12)
        .map(|&(f, e)| ((1.0 / f).round() as usize, e))
        .ok_or_else(|| {
            let ok: Vec<String> = PARTIAL_SCHEDULES.iter().map(|(f, _)| f.to_string()).collect();
            TrainError::Config(format!("unsupported label fraction {fraction} (supported: {})", ok.join(", ")))
        })
}

/// Every N-th frame per subject, and `cfg` with the matching epoch count.
///
/// Warmup is kept, capped at the new epoch count.
pub fn partial_protocol(
    manifest: &Manifest,
    fraction: f64,
    cfg: &TrainConfig,
) -> Result<(Manifest, TrainConfig), TrainError> {
    let (n, epochs) = partial_schedule(fraction)?;
    let subset = subsample_every_n(manifest, n).map_err(|e| TrainError::Config(e.to_string()))?;
    if subset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut out = cfg.clone();
    out.epochs = epochs;
    out.warmup_epochs = out.warmup_epochs.min(epochs);
    Ok((subset, out))
}
