use rand::Rng;

use super::ModelError;

/// Random split of patch indices into a visible prefix and a masked suffix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    permutation: Vec<usize>,
    num_visible: usize,
}

/// `floor(n · (1 − ratio))`, tolerant of representation error in `ratio`.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    ((n as f64) * (1.0 - ratio) + 1e-9).floor() as usize
}

impl MaskPlan {
    /// Builds a plan from an explicit permutation.
    pub fn new(permutation: Vec<usize>, num_visible: usize) -> Result<Self, ModelError> {
        let n = permutation.len();
        let mut seen = vec![false; n];
        for &p in &permutation {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return Err(ModelError::Mask(format!("not a permutation of 0..{n}")));
            }
        }
        if num_visible == 0 || num_visible > n {
            return Err(ModelError::Mask(format!("{num_visible} visible patches out of {n}")));
        }
        Ok(Self { permutation, num_visible })
    }

    /// Everything visible, in natural order.
    pub fn full(n: usize) -> Self {
        Self { permutation: (0..n).collect(), num_visible: n }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn num_visible(&self) -> usize {
        self.num_visible
    }

    pub fn num_masked(&self) -> usize {
        self.permutation.len() - self.num_visible
    }

    pub fn visible(&self) -> &[usize] {
        &self.permutation[..self.num_visible]
    }

    pub fn masked(&self) -> &[usize] {
        &self.permutation[self.num_visible..]
    }

    /// `inverse[p]` is the position of patch `p` inside the permutation.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.permutation.len()];
        for (pos, &p) in self.permutation.iter().enumerate() {
            inv[p] = pos;
        }
        inv
    }

    /// Per-patch flag, true where masked.
    pub fn mask_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.permutation.len()];
        for &p in self.masked() {
            flags[p] = true;
        }
        flags
    }
}

/// Uniform random plan: Fisher–Yates over `rng`, first `floor(N·(1−ratio))` kept.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, mask_ratio: f64, rng: &mut R) -> Result<MaskPlan, ModelError> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(ModelError::Mask(format!("mask ratio {mask_ratio} outside [0, 1)")));
    }
    if n == 0 {
        return Err(ModelError::Mask("no patches to mask".into()));
    }
    let num_visible = visible_count(n, mask_ratio);
    if num_visible == 0 {
        return Err(ModelError::Mask(format!("mask ratio {mask_ratio} leaves no visible patch out of {n}")));
    }
    let mut permutation: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        permutation.swap(i, j);
    }
    Ok(MaskPlan { permutation, num_visible })
}
