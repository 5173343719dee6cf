//! AdamW with decoupled weight decay, and its persistent state.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::vitmae::checkpoint::write_atomic;
use crate::vitmae::{ModelWeights, ParamSpec};

use super::TrainError;

const MAGIC: &[u8; 4] = b"MAEO";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter tensor, in canonical parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    /// Optimizer steps taken so far.
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl OptimState {
    pub fn new(weights: &ModelWeights) -> Self {
        let sizes: Vec<usize> = weights.params.refs().iter().map(|t| t.numel()).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u32).to_le_bytes());
        for (m, v) in self.m.iter().zip(&self.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        if bytes.len() < 52 || &bytes[..4] != MAGIC {
            return Err("not an optimizer state file".into());
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err("optimizer state checksum mismatch".into());
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8], String> {
            let s = body.get(pos..pos + n).ok_or("truncated optimizer state")?;
            pos += n;
            Ok(s)
        };
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(format!("optimizer state version {version} (this build reads {VERSION})"));
        }
        let step = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let n = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            let raw = take(n.checked_mul(8).ok_or("bad tensor length")?)?;
            let floats: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            m.push(floats[..n].to_vec());
            v.push(floats[n..].to_vec());
        }
        if pos != body.len() {
            return Err("trailing bytes in optimizer state".into());
        }
        Ok(Self { step, m, v })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        write_atomic(path, &self.to_bytes()).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|m| TrainError::State(format!("{}: {m}", path.display())))
    }

    /// Checks that the moment buffers match `weights`.
    pub fn check_against(&self, weights: &ModelWeights) -> Result<(), TrainError> {
        let sizes: Vec<usize> = weights.params.refs().iter().map(|t| t.numel()).collect();
        let ok = sizes.len() == self.m.len()
            && sizes.iter().zip(&self.m).zip(&self.v).all(|((&n, m), v)| m.len() == n && v.len() == n);
        if ok {
            Ok(())
        } else {
            Err(TrainError::State("optimizer state does not match the model layout".into()))
        }
    }
}

/// One AdamW update of a single tensor; moment math runs in f64.
///
/// Decay is applied first, as `w ← w·(1 − lr·wd)`, independent of the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    w: &mut [f32],
    g: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
    hp: &AdamW,
    decay: bool,
) {
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    let shrink = if decay { 1.0 - lr * hp.weight_decay } else { 1.0 };
    for i in 0..w.len() {
        let gi = g[i] as f64;
        let mi = hp.beta1 * m[i] as f64 + (1.0 - hp.beta1) * gi;
        let vi = hp.beta2 * v[i] as f64 + (1.0 - hp.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let upd = (mi / bc1) / ((vi / bc2).sqrt() + hp.eps);
        w[i] = (w[i] as f64 * shrink - lr * upd) as f32;
    }
}

/// Applies one optimizer step to every parameter that has a gradient.
///
/// `grads` follows canonical parameter order; `None` leaves a tensor untouched.
/// Non-finite gradients abort before anything is modified.
pub fn adamw_step(
    weights: &mut ModelWeights,
    grads: &[Option<Vec<f32>>],
    state: &mut OptimState,
    lr: f64,
    hp: &AdamW,
) -> Result<(), TrainError> {
    let specs: Vec<ParamSpec> = weights.layout().refs().into_iter().cloned().collect();
    if grads.len() != specs.len() {
        return Err(TrainError::State(format!("{} gradients for {} parameters", grads.len(), specs.len())));
    }
    for (g, s) in grads.iter().zip(&specs) {
        if let Some(g) = g {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite { step: state.step as usize, what: format!("gradient of {}", s.name) });
            }
        }
    }
    state.step += 1;
    let t = state.step;
    for (i, w) in weights.params.refs_mut().into_iter().enumerate() {
        if let Some(g) = &grads[i] {
            adamw_update(w.data_mut(), g, &mut state.m[i], &mut state.v[i], t, lr, hp, specs[i].decays());
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Concern};
    use crate::vitmae::ModelConfig;

    const HP: AdamW = AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 };

    #[test]
    fn first_step_closed_form() {
        // bias-corrected first step: update = g/|g| (up to eps)
        let (mut w, mut m, mut v) = (vec![1.0f32, -2.0], vec![0.0; 2], vec![0.0; 2]);
        adamw_update(&mut w, &[1.0, -3.0], &mut m, &mut v, 1, 0.1, &HP, false);
        assert!((w[0] as f64 - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-7);
        assert!((w[1] as f64 - (-2.0 + 0.1 * 3.0 / (3.0 + 1e-8))).abs() < 1e-6);
        assert!((m[0] - 0.1).abs() < 1e-7 && (v[1] - 0.009).abs() < 1e-7);
    }

    #[test]
    fn decay_is_decoupled() {
        let (mut w, mut m, mut v) = (vec![2.0f32], vec![0.0], vec![0.0]);
        adamw_update(&mut w, &[0.0], &mut m, &mut v, 1, 0.1, &HP, true);
        assert!((w[0] as f64 - 2.0 * (1.0 - 0.1 * 0.05)).abs() < 1e-6);
        let (mut w2, mut m2, mut v2) = (vec![2.0f32], vec![0.0], vec![0.0]);
        adamw_update(&mut w2, &[0.0], &mut m2, &mut v2, 1, 0.1, &HP, false);
        assert_eq!(w2[0], 2.0);
    }

    #[test]
    fn two_step_reference() {
        // hand-rolled f64 reference for a constant-gradient sequence
        let (mut w, mut m, mut v) = (vec![0.5f32], vec![0.0], vec![0.0]);
        let (mut rw, mut rm, mut rv) = (0.5f64, 0.0f64, 0.0f64);
        for (t, g) in [(1u64, 0.3f64), (2, -0.7)] {
            adamw_update(&mut w, &[g as f32], &mut m, &mut v, t, 0.01, &HP, true);
            rw *= 1.0 - 0.01 * 0.05;
            rm = 0.9 * rm + 0.1 * g;
            rv = 0.999 * rv + 0.001 * g * g;
            let mh = rm / (1.0 - 0.9f64.powi(t as i32));
            let vh = rv / (1.0 - 0.999f64.powi(t as i32));
            rw -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((w[0] as f64 - rw).abs() < 1e-6);
    }

    #[test]
    fn state_round_trip_and_non_finite() {
        let cfg = ModelConfig::desk();
        let mut weights = ModelWeights::init(&cfg, &mut stream(1, Concern::Init, 0, 0)).unwrap();
        let mut st = OptimState::new(&weights);
        let n = st.m.len();
        let mut grads: Vec<Option<Vec<f32>>> = st.m.iter().map(|m| Some(vec![0.01; m.len()])).collect();
        adamw_step(&mut weights, &grads, &mut st, 1e-3, &HP).unwrap();
        assert_eq!(st.step, 1);
        let back = OptimState::from_bytes(&st.to_bytes()).unwrap();
        assert_eq!(back, st);
        let mut bytes = st.to_bytes();
        bytes[20] ^= 1;
        assert!(OptimState::from_bytes(&bytes).is_err());

        let before = weights.clone();
        grads[n - 1].as_mut().unwrap()[0] = f32::NAN;
        let err = adamw_step(&mut weights, &grads, &mut st, 1e-3, &HP).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 1, .. }));
        assert_eq!(weights, before);
        assert_eq!(st.step, 1);
    }
}
