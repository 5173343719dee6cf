use rand::Rng;

use crate::ndgrad::{GradError, Scalar, Tape, Tensor, Var};
use crate::rng::RunRng;

/// Per-sample stochastic depth for residual branches.
#[derive(Clone, Debug)]
pub struct DropPath {
    rate: f64,
    rng: RunRng,
}

impl DropPath {
    pub fn new(rate: f64, rng: RunRng) -> Result<Self, String> {
        if !(0.0..1.0).contains(&rate) {
            return Err(format!("drop-path rate {rate} outside [0, 1)"));
        }
        Ok(Self { rate, rng })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// `None` drops the branch; otherwise the branch is scaled by `1/(1−rate)`.
    pub fn sample_scale(&mut self) -> Option<f64> {
        if self.rate == 0.0 {
            return Some(1.0);
        }
        if self.rng.random::<f64>() < self.rate {
            None
        } else {
            Some(1.0 / (1.0 - self.rate))
        }
    }
}

/// Drops whole samples (slices along axis 0) of a residual branch.
///
/// Identity when `training` is false or `rate` is 0.
pub fn drop_path<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    rate: f64,
    rng: &mut RunRng,
    training: bool,
) -> Result<Var, GradError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GradError::Domain(format!("drop-path rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let batch = shape.first().copied().unwrap_or(1);
    let per = tape.value(x).len() / batch;
    let keep_scale = T::lit(1.0 / (1.0 - rate));
    let scales: Vec<T> = (0..batch)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep_scale })
        .collect();
    let mask = Tensor::from_fn(shape, |i| scales[i / per]);
    let m = tape.constant(mask);
    tape.mul(x, m)
}
