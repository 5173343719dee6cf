//! Dense kernels shared by the forward and backward passes.
//!
//! All loops run in a fixed order so results are bitwise reproducible.

use super::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `out[m,n] += A · b[k,n]` where `A[i,p] = a[i*rs + p*cs]`.
///
/// Uses 256-bit vectors when the CPU has them; the arithmetic and its order
/// are identical on both paths.
fn gemm_strided<T: Scalar>(a: &[T], rs: usize, cs: usize, b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at runtime.
        return unsafe { gemm_avx2(a, rs, cs, b, out, m, k, n) };
    }
    gemm_tiled(a, rs, cs, b, out, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn gemm_avx2<T: Scalar>(a: &[T], rs: usize, cs: usize, b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_tiled(a, rs, cs, b, out, m, k, n)
}

/// Register-tiled: a 4xNR block of the output is accumulated across the
/// whole inner dimension before being added back.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_tiled<T: Scalar>(a: &[T], rs: usize, cs: usize, b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let full_i = m - m % MR;
    let full_j = n - n % NR;
    for i0 in (0..full_i).step_by(MR) {
        for j0 in (0..full_j).step_by(NR) {
            let mut acc0 = [T::zero(); NR];
            let mut acc1 = [T::zero(); NR];
            let mut acc2 = [T::zero(); NR];
            let mut acc3 = [T::zero(); NR];
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j0..p * n + j0 + NR].try_into().unwrap();
                let a0 = a[i0 * rs + p * cs];
                let a1 = a[(i0 + 1) * rs + p * cs];
                let a2 = a[(i0 + 2) * rs + p * cs];
                let a3 = a[(i0 + 3) * rs + p * cs];
                for c in 0..NR {
                    acc0[c] = acc0[c] + a0 * brow[c];
                    acc1[c] = acc1[c] + a1 * brow[c];
                    acc2[c] = acc2[c] + a2 * brow[c];
                    acc3[c] = acc3[c] + a3 * brow[c];
                }
            }
            for (r, accr) in [acc0, acc1, acc2, acc3].iter().enumerate() {
                let o = &mut out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR];
                for c in 0..NR {
                    o[c] = o[c] + accr[c];
                }
            }
        }
        if full_j < n {
            edge(a, rs, cs, b, out, i0..i0 + MR, full_j..n, k, n);
        }
    }
    if full_i < m {
        edge(a, rs, cs, b, out, full_i..m, 0..n, k, n);
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn edge<T: Scalar>(
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    out: &mut [T],
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    k: usize,
    n: usize,
) {
    for i in rows {
        let o = &mut out[i * n + cols.start..i * n + cols.end];
        let mut acc = vec![T::zero(); o.len()];
        for p in 0..k {
            let av = a[i * rs + p * cs];
            let brow = &b[p * n + cols.start..p * n + cols.end];
            for (x, &bv) in acc.iter_mut().zip(brow) {
                *x = *x + av * bv;
            }
        }
        for (x, v) in o.iter_mut().zip(acc) {
            *x = *x + v;
        }
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    gemm_strided(a, k, 1, b, out, m, k, n);
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m >= MR && n >= NR {
        let mut bt = vec![T::zero(); k * n];
        for j in 0..n {
            for p in 0..k {
                bt[p * n + j] = b[j * k + p];
            }
        }
        return gemm_strided(a, k, 1, &bt, out, m, k, n);
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = out[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    gemm_strided(a, 1, m, b, out, m, k, n);
}

/// Dot product with eight independent partial sums (lets the compiler vectorize).
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] = acc[l] + xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * xv;
    }
}

#[inline]
pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}
