//! Reconstruction, detection and intensity objectives.

use std::fmt;
use std::str::FromStr;

use crate::ndgrad::{GradError, Scalar, Tape, Tensor, Var};
use crate::vitmae::MaskPlan;

pub const PATCH_NORM_EPS: f64 = 1e-6;
pub const MAX_INTENSITY: u8 = 5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("reconstruction loss needs at least one masked patch (mask ratio 0)")]
    EmptyMask,
    #[error("invalid labels: {0}")]
    Labels(String),
    #[error("intensity labels are required for the intensity loss")]
    MissingIntensity,
    #[error("occurrence labels are required for the detection loss")]
    MissingOccurrence,
    #[error(transparent)]
    Grad(#[from] GradError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossFlavor {
    L1,
    L2,
}

impl fmt::Display for LossFlavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossFlavor::L1 => "l1",
            LossFlavor::L2 => "l2",
        })
    }
}

impl FromStr for LossFlavor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(LossFlavor::L1),
            "l2" => Ok(LossFlavor::L2),
            _ => Err(format!("unknown loss flavor {s:?} (expected l1 or l2)")),
        }
    }
}

/// Mean divides by the element / batch count; sum keeps the literal totals.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    Mean,
    Sum,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

impl FromStr for Reduction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(format!("unknown reduction {s:?} (expected mean or sum)")),
        }
    }
}

impl Reduction {
    /// Factor applied to each sample's loss when combining a batch.
    pub fn batch_weight(self, batch: usize) -> f64 {
        match self {
            Reduction::Mean => 1.0 / batch.max(1) as f64,
            Reduction::Sum => 1.0,
        }
    }
}

/// Reconstruction targets, optionally standardized per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainTargets<T: Scalar = f32> {
    pub patches: Tensor<T>,
    pub normalized: bool,
    /// Per-patch (mean, variance) of the raw pixels when normalized.
    pub stats: Vec<(T, T)>,
    pub eps: f64,
}

impl<T: Scalar> PretrainTargets<T> {
    pub fn raw(patches: Tensor<T>) -> Self {
        Self { patches, normalized: false, stats: Vec::new(), eps: 0.0 }
    }

    /// Maps predictions in target space back to pixel space.
    pub fn denormalize(&self, pred: &Tensor<T>) -> Tensor<T> {
        if !self.normalized {
            return pred.clone();
        }
        let d = pred.shape()[1];
        let eps = T::lit(self.eps);
        let mut out = pred.clone();
        for (row, &(mu, var)) in out.data_mut().chunks_mut(d).zip(&self.stats) {
            let sd = (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = *v * sd + mu);
        }
        out
    }
}

/// Row-wise `(x − µ) / √(σ² + eps)` with population variance.
pub fn patch_normalize<T: Scalar>(patches: &Tensor<T>, eps: f64) -> PretrainTargets<T> {
    let d = *patches.shape().last().unwrap_or(&1);
    let eps_t = T::lit(eps);
    let inv_d = T::one() / T::lit(d as f64);
    let mut out = patches.clone();
    let mut stats = Vec::with_capacity(patches.numel() / d);
    for row in out.data_mut().chunks_mut(d) {
        let mu = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps_t).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mu) * rs);
        stats.push((mu, var));
    }
    PretrainTargets { patches: out, normalized: true, stats, eps }
}

/// Pixel loss over the masked patches only.
///
/// With [`Reduction::Mean`] this is the mean over all masked elements; with
/// [`Reduction::Sum`] the total over them.
pub fn loss_pretrain<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    targets: &PretrainTargets<T>,
    plan: &MaskPlan,
    flavor: LossFlavor,
    reduction: Reduction,
) -> Result<Var, LossError> {
    if tape.shape(pred) != targets.patches.shape() {
        return Err(GradError::Shape(format!(
            "prediction {:?} vs targets {:?}",
            tape.shape(pred),
            targets.patches.shape()
        ))
        .into());
    }
    let masked = plan.masked();
    if masked.is_empty() {
        return Err(LossError::EmptyMask);
    }
    let d = targets.patches.shape()[1];
    let mut sel_targets = Vec::with_capacity(masked.len() * d);
    for &m in masked {
        sel_targets.extend_from_slice(targets.patches.row(m));
    }
    let sel = tape.index_select(pred, masked)?;
    let tgt = tape.constant(Tensor::new(vec![masked.len(), d], sel_targets)?);
    let diff = tape.sub(sel, tgt)?;
    let err = match flavor {
        LossFlavor::L1 => tape.abs(diff)?,
        LossFlavor::L2 => tape.square(diff)?,
    };
    Ok(match reduction {
        Reduction::Mean => tape.mean(err)?,
        Reduction::Sum => tape.sum(err)?,
    })
}

/// Per-sample AU annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct AULabels {
    /// Occurrence targets; 0/1 from annotation, soft values after mixing.
    pub occurrence: Option<Vec<f64>>,
    /// Intensity levels 0..=5.
    pub intensity: Option<Vec<u8>>,
    /// Per-AU validity; invalid entries are excluded from every loss.
    pub valid: Vec<bool>,
}

impl AULabels {
    pub fn from_occurrence(bits: &[u8]) -> Result<Self, LossError> {
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(LossError::Labels(format!("occurrence value {b} outside {{0,1}}")));
        }
        Ok(Self {
            occurrence: Some(bits.iter().map(|&b| b as f64).collect()),
            intensity: None,
            valid: vec![true; bits.len()],
        })
    }

    pub fn from_intensity(levels: &[u8]) -> Result<Self, LossError> {
        if let Some(l) = levels.iter().find(|&&l| l > MAX_INTENSITY) {
            return Err(LossError::Labels(format!("intensity {l} outside 0..=5")));
        }
        Ok(Self { occurrence: None, intensity: Some(levels.to_vec()), valid: vec![true; levels.len()] })
    }

    pub fn with_valid(mut self, valid: Vec<bool>) -> Self {
        self.valid = valid;
        self
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

fn weights<T: Scalar>(labels: &AULabels, n: usize) -> Result<Vec<T>, LossError> {
    if labels.valid.len() != n {
        return Err(LossError::Labels(format!("{} validity flags for {n} outputs", labels.valid.len())));
    }
    Ok(labels.valid.iter().map(|&v| if v { T::one() } else { T::zero() }).collect())
}

/// Sigmoid binary cross-entropy summed over valid AUs (one sample).
pub fn loss_detection<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &AULabels) -> Result<Var, LossError> {
    let occ = labels.occurrence.as_ref().ok_or(LossError::MissingOccurrence)?;
    let n = tape.value(logits).len();
    if occ.len() != n {
        return Err(LossError::Labels(format!("{} occurrence labels for {n} logits", occ.len())));
    }
    if let Some(p) = occ.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(LossError::Labels(format!("occurrence target {p} outside [0, 1]")));
    }
    let w = weights(labels, n)?;
    let targets: Vec<T> = occ.iter().map(|&p| T::lit(p)).collect();
    Ok(tape.bce_with_logits(logits, &targets, &w)?)
}

/// Squared error against `level / 5`, summed over valid AUs (one sample).
///
/// `pred` is expected on the 0–1 scale (sigmoid of the head output).
pub fn loss_intensity<T: Scalar>(tape: &mut Tape<T>, pred: Var, labels: &AULabels) -> Result<Var, LossError> {
    let levels = labels.intensity.as_ref().ok_or(LossError::MissingIntensity)?;
    let n = tape.value(pred).len();
    if levels.len() != n {
        return Err(LossError::Labels(format!("{} intensity labels for {n} outputs", levels.len())));
    }
    let w = weights::<T>(labels, n)?;
    let target = tape.constant(Tensor::new(
        tape.shape(pred).to_vec(),
        levels.iter().map(|&l| T::lit(normalize_intensity(l))).collect(),
    )?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff)?;
    let masked = if w.iter().all(|&v| v == T::one()) {
        sq
    } else {
        let wv = tape.constant(Tensor::new(tape.shape(pred).to_vec(), w)?);
        tape.mul(sq, wv)?
    };
    Ok(tape.sum(masked)?)
}

pub fn normalize_intensity(level: u8) -> f64 {
    level as f64 / MAX_INTENSITY as f64
}

/// Back to the 0–5 scale, clamped.
pub fn denormalize_intensity<T: Scalar>(pred: &[T]) -> Vec<T> {
    let five = T::lit(MAX_INTENSITY as f64);
    pred.iter().map(|&v| (v * five).max(T::zero()).min(five)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Concern};
    use crate::vitmae::sample_mask;
    use rand::Rng;

    fn random(seed: u64, n: usize) -> Vec<f64> {
        let mut r = stream(seed, Concern::Synth, 99, 0);
        (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn normalize_rows() {
        let t = Tensor::new(vec![1, 4], vec![5.0f64; 4]).unwrap();
        assert!(patch_normalize(&t, 1e-6).patches.data().iter().all(|v| v.abs() < 1e-9));
        let t = Tensor::new(vec![1, 2], vec![-1.0f64, 1.0]).unwrap();
        let n = patch_normalize(&t, 1e-6).patches;
        assert!((n.data()[0] + 1.0).abs() < 1e-6 && (n.data()[1] - 1.0).abs() < 1e-6);

        let t = Tensor::new(vec![3, 16], random(1, 48)).unwrap();
        let n = patch_normalize(&t, 1e-12);
        for row in n.patches.data().chunks(16) {
            let mu = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
            assert!(mu.abs() < 1e-6 && (var - 1.0).abs() < 1e-4);
        }
        let back = n.denormalize(&n.patches);
        assert!(back.max_abs_diff(&t) < 1e-9);
    }

    fn setup(seed: u64) -> (Tensor<f64>, MaskPlan) {
        let t = Tensor::new(vec![16, 4], random(seed, 64)).unwrap();
        let plan = sample_mask(16, 0.75, &mut stream(seed, Concern::Mask, 0, 0)).unwrap();
        (t, plan)
    }

    #[test]
    fn pretrain_loss_identities() {
        let (t, plan) = setup(2);
        let targets = PretrainTargets::raw(t.clone());
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(t.clone());
        let l = loss_pretrain(&mut tape, p, &targets, &plan, LossFlavor::L1, Reduction::Mean).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let shifted = t.map(|v| v - 0.3);
        let p = tape.constant(shifted);
        let l = loss_pretrain(&mut tape, p, &targets, &plan, LossFlavor::L1, Reduction::Mean).unwrap();
        assert!((tape.scalar_value(l) - 0.3).abs() < 1e-12);

        let empty = MaskPlan::full(16);
        let p = tape.constant(t.clone());
        assert_eq!(
            loss_pretrain(&mut tape, p, &targets, &empty, LossFlavor::L1, Reduction::Mean),
            Err(LossError::EmptyMask)
        );
    }

    #[test]
    fn pretrain_loss_matches_loop() {
        let (t, plan) = setup(3);
        let pred = Tensor::new(vec![16, 4], random(33, 64)).unwrap();
        let targets = PretrainTargets::raw(t.clone());
        for (flavor, reduction) in [
            (LossFlavor::L1, Reduction::Mean),
            (LossFlavor::L2, Reduction::Mean),
            (LossFlavor::L1, Reduction::Sum),
        ] {
            let mut want = 0.0;
            for &m in plan.masked() {
                for j in 0..4 {
                    let d = pred.row(m)[j] - t.row(m)[j];
                    want += if flavor == LossFlavor::L1 { d.abs() } else { d * d };
                }
            }
            if reduction == Reduction::Mean {
                want /= (plan.num_masked() * 4) as f64;
            }
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(pred.clone());
            let l = loss_pretrain(&mut tape, p, &targets, &plan, flavor, reduction).unwrap();
            assert!((tape.scalar_value(l) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn pretrain_loss_ignores_visible_patches() {
        let (t, plan) = setup(4);
        let targets = PretrainTargets::raw(t);
        let pred = Tensor::new(vec![16, 4], random(44, 64)).unwrap();
        let mut perturbed = pred.clone();
        for &v in plan.visible() {
            for j in 0..4 {
                perturbed.data_mut()[v * 4 + j] += 1000.0 * (j as f64 + 1.0);
            }
        }
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(pred);
        let b = tape.constant(perturbed);
        let la = loss_pretrain(&mut tape, a, &targets, &plan, LossFlavor::L1, Reduction::Mean).unwrap();
        let lb = loss_pretrain(&mut tape, b, &targets, &plan, LossFlavor::L1, Reduction::Mean).unwrap();
        assert_eq!(tape.scalar_value(la).to_bits(), tape.scalar_value(lb).to_bits());
    }

    #[test]
    fn detection_loss_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros(vec![12]));
        let labels = AULabels::from_occurrence(&[1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1]).unwrap();
        let l = loss_detection(&mut tape, z, &labels).unwrap();
        assert!((tape.scalar_value(l) - 12.0 * 2f64.ln()).abs() < 1e-12);

        let big = tape.constant(Tensor::vector(&[40.0]));
        let one = AULabels::from_occurrence(&[1]).unwrap();
        let zero = AULabels::from_occurrence(&[0]).unwrap();
        let l1 = loss_detection(&mut tape, big, &one).unwrap();
        let l0 = loss_detection(&mut tape, big, &zero).unwrap();
        assert!(tape.scalar_value(l1) < 1e-15);
        assert!(tape.scalar_value(l0).is_finite() && (tape.scalar_value(l0) - 40.0).abs() < 1e-9);

        let logits = random(5, 8);
        let bits: Vec<u8> = random(6, 8).iter().map(|v| (*v > 0.0) as u8).collect();
        let want: f64 = logits
            .iter()
            .zip(&bits)
            .map(|(&x, &p)| {
                let q = 1.0 / (1.0 + (-x).exp());
                let p = p as f64;
                -(p * q.ln() + (1.0 - p) * (1.0 - q).ln())
            })
            .sum();
        let v = tape.constant(Tensor::vector(&logits));
        let l = loss_detection(&mut tape, v, &AULabels::from_occurrence(&bits).unwrap()).unwrap();
        assert!((tape.scalar_value(l) - want).abs() < 1e-9);

        assert!(AULabels::from_occurrence(&[2]).is_err());
    }

    #[test]
    fn detection_gradient_at_zero_is_minus_half() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::vector(&[0.0]).with_grad());
        let l = loss_detection(&mut tape, x, &AULabels::from_occurrence(&[1]).unwrap()).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[-0.5]);
    }

    #[test]
    fn invalid_aus_are_excluded() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::vector(&[0.0, 3.0]));
        let labels = AULabels::from_occurrence(&[1, 0]).unwrap().with_valid(vec![true, false]);
        let l = loss_detection(&mut tape, x, &labels).unwrap();
        assert!((tape.scalar_value(l) - 2f64.ln()).abs() < 1e-12);

        let p = tape.constant(Tensor::vector(&[0.0, 0.9]));
        let labels = AULabels::from_intensity(&[5, 0]).unwrap().with_valid(vec![false, true]);
        let l = loss_intensity(&mut tape, p, &labels).unwrap();
        assert!((tape.scalar_value(l) - 0.81).abs() < 1e-12);
    }

    #[test]
    fn intensity_loss_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::vector(&[0.4, 1.0, 0.0]));
        let l = loss_intensity(&mut tape, p, &AULabels::from_intensity(&[2, 5, 0]).unwrap()).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);

        let p = tape.constant(Tensor::vector(&[0.5]));
        let l = loss_intensity(&mut tape, p, &AULabels::from_intensity(&[2]).unwrap()).unwrap();
        assert!((tape.scalar_value(l) - 0.01).abs() < 1e-15);

        let preds: Vec<f64> = random(7, 6).iter().map(|v| (v + 2.0) / 4.0).collect();
        let levels = [0u8, 1, 2, 3, 4, 5];
        let want: f64 = preds.iter().zip(&levels).map(|(p, &l)| (l as f64 / 5.0 - p).powi(2)).sum();
        let p = tape.constant(Tensor::vector(&preds));
        let l = loss_intensity(&mut tape, p, &AULabels::from_intensity(&levels).unwrap()).unwrap();
        assert!((tape.scalar_value(l) - want).abs() < 1e-12);

        let occ_only = AULabels::from_occurrence(&[1]).unwrap();
        let p = tape.constant(Tensor::vector(&[0.5]));
        assert_eq!(loss_intensity(&mut tape, p, &occ_only), Err(LossError::MissingIntensity));
    }

    #[test]
    fn intensity_scale_round_trip() {
        assert_eq!(denormalize_intensity(&[0.0f64, 1.0, 0.4, 1.2, -0.1]), vec![0.0, 5.0, 2.0, 5.0, 0.0]);
        for l in 0..=5u8 {
            let back = denormalize_intensity(&[normalize_intensity(l)])[0];
            assert_eq!(back, l as f64);
        }
    }
}
