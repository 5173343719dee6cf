//! Image and batch augmentations on `[C, H, W]` tensors in [0, 1].
//!
//! Everything here is a training-time transform; evaluation code never calls
//! it, and [`Mode::Eval`] turns [`augment_batch`] into the identity.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::data::{warp_planes, Border};
use crate::ndgrad::Tensor;
use crate::rng::RunRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn dims(image: &Tensor<f32>) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

fn warp(image: &Tensor<f32>, border: Border, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f32> {
    let (c, h, w) = dims(image);
    let data = warp_planes(image.data(), c, h, w, h, w, border, inverse);
    Tensor::new(vec![c, h, w], data).expect("shape preserved")
}

/// Crops a region covering `scale_min..=1` of the area (aspect 3:4 to 4:3)
/// and resizes it back to full size.
pub fn random_resized_crop(image: &Tensor<f32>, scale_min: f64, rng: &mut RunRng) -> Tensor<f32> {
    if scale_min >= 1.0 {
        return image.clone();
    }
    let (_, h, w) = dims(image);
    let area = (h * w) as f64;
    let s = rng.random_range(scale_min..=1.0);
    let log_r = rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln());
    let r = log_r.exp();
    let cw = (s * area * r).sqrt().min(w as f64);
    let ch = (s * area / r).sqrt().min(h as f64);
    let x0 = rng.random_range(0.0..=(w as f64 - cw));
    let y0 = rng.random_range(0.0..=(h as f64 - ch));
    let (sx, sy) = (cw / w as f64, ch / h as f64);
    warp(image, Border::Clamp, |ox, oy| (x0 + (ox + 0.5) * sx - 0.5, y0 + (oy + 0.5) * sy - 0.5))
}

/// The light RandAugment operation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    HFlip,
    Translate,
    Rotate,
    Brightness,
    Contrast,
    CropResize,
}

pub const AUG_OPS: [AugOp; 6] =
    [AugOp::HFlip, AugOp::Translate, AugOp::Rotate, AugOp::Brightness, AugOp::Contrast, AugOp::CropResize];

/// Applies `op` at `magnitude` in [0, 10]; magnitude 0 is the identity for every op.
pub fn apply_op(image: &Tensor<f32>, op: AugOp, magnitude: f64, rng: &mut RunRng) -> Tensor<f32> {
    let f = (magnitude / 10.0).clamp(0.0, 1.0);
    if f == 0.0 {
        return image.clone();
    }
    let (_, h, w) = dims(image);
    let signed = |rng: &mut RunRng| rng.random_range(-1.0..=1.0f64);
    match op {
        AugOp::HFlip => warp(image, Border::Clamp, |x, y| ((w - 1) as f64 - x, y)),
        AugOp::Translate => {
            let dx = signed(rng) * 0.15 * f * w as f64;
            let dy = signed(rng) * 0.15 * f * h as f64;
            warp(image, Border::Fill(0.0), |x, y| (x - dx, y - dy))
        }
        AugOp::Rotate => {
            let a = signed(rng) * 15f64.to_radians() * f;
            let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
            let (s, c) = a.sin_cos();
            warp(image, Border::Fill(0.0), |x, y| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + c * dx + s * dy, cy - s * dx + c * dy)
            })
        }
        AugOp::Brightness => {
            let k = (1.0 + signed(rng) * 0.5 * f) as f32;
            image.map(|v| (v * k).clamp(0.0, 1.0))
        }
        AugOp::Contrast => {
            let k = (1.0 + signed(rng) * 0.5 * f) as f32;
            let mean = image.data().iter().sum::<f32>() / image.numel() as f32;
            image.map(|v| (mean + (v - mean) * k).clamp(0.0, 1.0))
        }
        AugOp::CropResize => {
            let s = 1.0 - 0.3 * f * rng.random::<f64>();
            let (cw, ch) = (s * w as f64, s * h as f64);
            let x0 = rng.random_range(0.0..=(w as f64 - cw));
            let y0 = rng.random_range(0.0..=(h as f64 - ch));
            warp(image, Border::Clamp, |ox, oy| (x0 + (ox + 0.5) * s - 0.5, y0 + (oy + 0.5) * s - 0.5))
        }
    }
}

/// With probability `prob`, applies two ops drawn uniformly (with replacement).
pub fn randaug_light(image: &Tensor<f32>, magnitude: f64, prob: f64, rng: &mut RunRng) -> Tensor<f32> {
    if prob <= 0.0 || rng.random::<f64>() >= prob {
        return image.clone();
    }
    let mut out = image.clone();
    for _ in 0..2 {
        let op = AUG_OPS[rng.random_range(0..AUG_OPS.len())];
        out = apply_op(&out, op, magnitude, rng);
    }
    out
}

/// Result of a batch-level mix.
#[derive(Clone, Debug)]
pub struct Mixed {
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<Vec<f64>>,
    /// Weight of the original sample (realized area ratio for cutmix).
    pub lambda: f64,
    pub partner: Vec<usize>,
}

fn mix_labels(labels: &[Vec<f64>], lambda: f64, partner: &[usize]) -> Vec<Vec<f64>> {
    labels
        .iter()
        .zip(partner)
        .map(|(y, &j)| y.iter().zip(&labels[j]).map(|(a, b)| lambda * a + (1.0 - lambda) * b).collect())
        .collect()
}

/// `x_i ← λ·x_i + (1−λ)·x_partner(i)`, labels likewise.
pub fn mixup_with(images: &[Tensor<f32>], labels: &[Vec<f64>], lambda: f64, partner: &[usize]) -> Mixed {
    let l = lambda as f32;
    let mixed = images
        .iter()
        .zip(partner)
        .map(|(x, &j)| {
            let data = x.data().iter().zip(images[j].data()).map(|(a, b)| l * a + (1.0 - l) * b).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        })
        .collect();
    Mixed { images: mixed, labels: mix_labels(labels, lambda, partner), lambda, partner: partner.to_vec() }
}

/// Axis-aligned pasted region, in pixels, `[y0, y1) × [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutBox {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl CutBox {
    /// Box of side `sqrt(1−λ)` times the image, centred at `(cy, cx)`, clipped.
    pub fn around(h: usize, w: usize, lambda: f64, cy: usize, cx: usize) -> Self {
        let cut = (1.0 - lambda).max(0.0).sqrt();
        let (ch, cw) = ((h as f64 * cut) as usize, (w as f64 * cut) as usize);
        CutBox {
            y0: cy.saturating_sub(ch / 2),
            y1: (cy + ch / 2).min(h),
            x0: cx.saturating_sub(cw / 2),
            x1: (cx + cw / 2).min(w),
        }
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }
}

/// Pastes `region` from each partner; labels use the realized area ratio.
pub fn cutmix_with(images: &[Tensor<f32>], labels: &[Vec<f64>], region: CutBox, partner: &[usize]) -> Mixed {
    let (c, h, w) = dims(&images[0]);
    let lambda = 1.0 - region.area() as f64 / (h * w) as f64;
    let mixed = images
        .iter()
        .zip(partner)
        .map(|(x, &j)| {
            let mut out = x.clone();
            let src = images[j].data();
            let dst = out.data_mut();
            for ch in 0..c {
                for y in region.y0..region.y1 {
                    let row = (ch * h + y) * w;
                    dst[row + region.x0..row + region.x1].copy_from_slice(&src[row + region.x0..row + region.x1]);
                }
            }
            out
        })
        .collect();
    Mixed { images: mixed, labels: mix_labels(labels, lambda, partner), lambda, partner: partner.to_vec() }
}

fn permutation(n: usize, rng: &mut RunRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn beta(alpha: f64, rng: &mut RunRng) -> f64 {
    Beta::new(alpha, alpha).expect("alpha > 0").sample(rng)
}

pub fn mixup(images: &[Tensor<f32>], labels: &[Vec<f64>], alpha: f64, rng: &mut RunRng) -> Mixed {
    let lambda = beta(alpha, rng);
    let partner = permutation(images.len(), rng);
    mixup_with(images, labels, lambda, &partner)
}

pub fn cutmix(images: &[Tensor<f32>], labels: &[Vec<f64>], alpha: f64, rng: &mut RunRng) -> Mixed {
    let (_, h, w) = dims(&images[0]);
    let lambda = beta(alpha, rng);
    let region = CutBox::around(h, w, lambda, rng.random_range(0..h), rng.random_range(0..w));
    let partner = permutation(images.len(), rng);
    cutmix_with(images, labels, region, &partner)
}

/// Batch-level mixing settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixConfig {
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    /// Chance of cutmix when both are enabled.
    pub switch_prob: f64,
}

/// Mixup or cutmix according to `cfg`; identity in [`Mode::Eval`], with
/// nothing enabled, or for a batch of one.
pub fn augment_batch(
    images: Vec<Tensor<f32>>,
    labels: Vec<Vec<f64>>,
    cfg: &MixConfig,
    mode: Mode,
    rng: &mut RunRng,
) -> (Vec<Tensor<f32>>, Vec<Vec<f64>>) {
    let (mu, cu) = (cfg.mixup_alpha > 0.0, cfg.cutmix_alpha > 0.0);
    if mode == Mode::Eval || images.len() < 2 || !(mu || cu) {
        return (images, labels);
    }
    let use_cut = match (mu, cu) {
        (true, true) => rng.random::<f64>() < cfg.switch_prob,
        (false, true) => true,
        _ => false,
    };
    let m = if use_cut {
        cutmix(&images, &labels, cfg.cutmix_alpha, rng)
    } else {
        mixup(&images, &labels, cfg.mixup_alpha, rng)
    };
    (m.images, m.labels)
}
