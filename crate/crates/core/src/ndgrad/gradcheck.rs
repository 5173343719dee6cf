//! Central-difference gradient checking in 64-bit.

use super::{GradError, Tape, Tensor, Var};

/// Outcome of comparing analytic and numerical gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Coordinate where the largest error occurred.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Denominator floor in the relative error; below it the error is absolute.
pub const REL_FLOOR: f64 = 1e-5;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares an arbitrary gradient routine against central differences of `value`.
pub fn grad_check_fn(
    value: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    x: &[f64],
    coords: &[usize],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let analytic = grad(x);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol,
    };
    let mut probe = x.to_vec();
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = value(&probe);
        probe[i] = orig - h;
        let down = value(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.checked == 1 {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst_index = i;
                report.analytic = analytic[i];
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Checks every coordinate of `x` for a scalar-valued tape function.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport, GradError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, GradError>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    grad_check_coords(f, x, &coords, h, tol)
}

/// Like [`grad_check`] but only probes the listed coordinates.
pub fn grad_check_coords<F>(
    f: F,
    x: &Tensor<f64>,
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, GradError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, GradError>,
{
    let eval = |data: &[f64]| -> Result<f64, GradError> {
        let mut tape = Tape::new();
        let t = Tensor::new(x.shape().to_vec(), data.to_vec())?.with_grad();
        let v = tape.leaf(&t);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar_value(out))
    };
    // Surface any error from the function once before probing.
    let mut tape = Tape::new();
    let v = tape.leaf(&x.clone().with_grad());
    let out = f(&mut tape, v)?;
    tape.backward(out)?;
    let analytic = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);
    Ok(grad_check_fn(
        |d| eval(d).expect("function succeeded on the unperturbed input"),
        |_| analytic.clone(),
        x.data(),
        coords,
        h,
        tol,
    ))
}
