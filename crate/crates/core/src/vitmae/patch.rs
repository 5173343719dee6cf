use crate::ndgrad::{Scalar, Tensor};

use super::ModelError;

/// Splits a `[C, H, W]` image into `[N, p²·C]` non-overlapping patches.
///
/// Patches are numbered row-major over the patch grid; inside a patch the
/// pixels run row-major with the channel index varying fastest.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>, ModelError> {
    let &[c, h, w] = image.shape() else {
        return Err(ModelError::Shape(format!("patchify expects [C, H, W], got {:?}", image.shape())));
    };
    if patch == 0 || h != w || h % patch != 0 {
        return Err(ModelError::Shape(format!(
            "image {h}x{w} cannot be split into {patch}x{patch} patches"
        )));
    }
    let g = w / patch;
    let dim = patch * patch * c;
    let src = image.data();
    let mut out = Vec::with_capacity(g * g * dim);
    for gy in 0..g {
        for gx in 0..g {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![g * g, dim], out)?)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, channels: usize, patch: usize) -> Result<Tensor<T>, ModelError> {
    let &[n, dim] = patches.shape() else {
        return Err(ModelError::Shape(format!("unpatchify expects [N, D], got {:?}", patches.shape())));
    };
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || dim != patch * patch * channels {
        return Err(ModelError::Shape(format!(
            "{n} patches of width {dim} do not form a square {channels}-channel image with patch {patch}"
        )));
    }
    let side = g * patch;
    let mut out = vec![T::zero(); channels * side * side];
    let src = patches.data();
    for (r, row) in src.chunks(dim).enumerate() {
        let (gy, gx) = (r / g, r % g);
        let mut k = 0;
        for py in 0..patch {
            for px in 0..patch {
                let (y, x) = (gy * patch + py, gx * patch + px);
                for ch in 0..channels {
                    out[(ch * side + y) * side + x] = row[k];
                    k += 1;
                }
            }
        }
    }
    Ok(Tensor::new(vec![channels, side, side], out)?)
}

/// Fixed 2-D sine-cosine position table of shape `[N, D]`.
///
/// The first half of each row encodes the column index, the second half the
/// row index; each half is `[sin(pos·ω), cos(pos·ω)]` with
/// `ω_i = 10000^{-i/(D/4)}`.
pub fn pos_embed_sincos<T: Scalar>(n: usize, d: usize) -> Result<Tensor<T>, ModelError> {
    let g = (n as f64).sqrt().round() as usize;
    if n == 0 || g * g != n {
        return Err(ModelError::Shape(format!("position table needs a square patch count, got {n}")));
    }
    if d == 0 || d % 4 != 0 {
        return Err(ModelError::Shape(format!("position table width {d} is not divisible by 4")));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter).map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64)).collect();
    let mut out = Vec::with_capacity(n * d);
    for gy in 0..g {
        for gx in 0..g {
            for pos in [gx as f64, gy as f64] {
                out.extend(omega.iter().map(|w| T::lit((pos * w).sin())));
                out.extend(omega.iter().map(|w| T::lit((pos * w).cos())));
            }
        }
    }
    Ok(Tensor::new(vec![n, d], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_patch_order() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let p = patchify(&img, 1).unwrap();
        assert_eq!(p.shape(), &[4, 1]);
        assert_eq!(p.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn channel_fastest_within_patch() {
        // 2 channels, 2x2 image, one 2x2 patch
        let img = Tensor::new(vec![2, 2, 2], vec![0.0f32, 1.0, 2.0, 3.0, 10.0, 11.0, 12.0, 13.0]).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.data(), &[0.0, 10.0, 1.0, 11.0, 2.0, 12.0, 3.0, 13.0]);
    }

    #[test]
    fn base_token_width() {
        let img = Tensor::<f32>::zeros(vec![3, 64, 64]);
        assert_eq!(patchify(&img, 16).unwrap().shape(), &[16, 768]);
    }

    #[test]
    fn round_trip_is_exact() {
        let img = Tensor::<f32>::from_fn(vec![3, 32, 32], |i| (i as f32 * 0.37).sin());
        let back = unpatchify(&patchify(&img, 4).unwrap(), 3, 4).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let img = Tensor::<f32>::zeros(vec![1, 30, 30]);
        assert!(patchify(&img, 4).is_err());
    }

    #[test]
    fn position_table_properties() {
        let t = pos_embed_sincos::<f64>(4, 8).unwrap();
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(t, pos_embed_sincos::<f64>(4, 8).unwrap());
        // grid (0,0) is row 0; grid (1,1) is row 3
        let diff = t.row(0).iter().zip(t.row(3)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff > 0.1);
        // independent evaluation for (1,1): ω = [1, 0.01]
        let want = [1f64.sin(), 0.01f64.sin(), 1f64.cos(), 0.01f64.cos()];
        for k in 0..4 {
            assert!((t.row(3)[k] - want[k]).abs() < 1e-15);
            assert!((t.row(3)[4 + k] - want[k]).abs() < 1e-15);
        }
        assert!(pos_embed_sincos::<f64>(5, 8).is_err());
    }
}
