//! Resampling, alignment and cropping.
//!
//! Coordinates are `(x, y)` with pixel centers on integers: pixel `(row r,
//! col c)` sits at `x = c, y = r`, and `y` grows downward.

use serde::{Deserialize, Serialize};

use super::image::Image;
use super::DataError;

pub type Point = [f64; 2];

/// How samples outside the source are resolved.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Border {
    /// Clamp to the nearest edge pixel.
    Clamp,
    /// Treat outside pixels as this value.
    Fill(f32),
}

/// Bilinear sample of one plane at `(x, y)`.
#[inline]
pub fn sample_bilinear(plane: &[f32], h: usize, w: usize, x: f64, y: f64, border: Border) -> f32 {
    let (x, y) = match border {
        Border::Clamp => (x.clamp(0.0, (w - 1) as f64), y.clamp(0.0, (h - 1) as f64)),
        Border::Fill(_) => (x, y),
    };
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let at = |yy: i64, xx: i64| -> f32 {
        if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
            plane[yy as usize * w + xx as usize]
        } else {
            match border {
                Border::Fill(v) => v,
                Border::Clamp => plane[(yy.clamp(0, h as i64 - 1) as usize) * w + xx.clamp(0, w as i64 - 1) as usize],
            }
        }
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x0 + 1) * fx;
    let bottom = at(y0 + 1, x0) * (1.0 - fx) + at(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples channel-major planes; `inverse` maps an output pixel center to
/// its source coordinate.
#[allow(clippy::too_many_arguments)]
pub fn warp_planes(
    planes: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    border: Border,
    inverse: impl Fn(f64, f64) -> (f64, f64),
) -> Vec<f32> {
    let mut out = vec![0.0; channels * out_h * out_w];
    for oy in 0..out_h {
        for ox in 0..out_w {
            let (sx, sy) = inverse(ox as f64, oy as f64);
            for c in 0..channels {
                out[(c * out_h + oy) * out_w + ox] =
                    sample_bilinear(&planes[c * h * w..(c + 1) * h * w], h, w, sx, sy, border);
            }
        }
    }
    out
}

fn warp_image(
    image: &Image,
    out_h: usize,
    out_w: usize,
    border: Border,
    inverse: impl Fn(f64, f64) -> (f64, f64),
) -> Image {
    let c = image.channels();
    let planes = warp_planes(&image.to_planes(), c, image.height(), image.width(), out_h, out_w, border, inverse);
    Image::from_planes(c, out_h, out_w, &planes).expect("consistent extents")
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Image, out_h: usize, out_w: usize) -> Result<Image, DataError> {
    if out_h < 1 || out_w < 1 {
        return Err(DataError::Geometry(format!("resize target {out_w}x{out_h} must be at least 1x1")));
    }
    if (out_h, out_w) == (image.height(), image.width()) {
        return Ok(image.clone());
    }
    let sy = image.height() as f64 / out_h as f64;
    let sx = image.width() as f64 / out_w as f64;
    Ok(warp_image(image, out_h, out_w, Border::Clamp, |x, y| {
        ((x + 0.5) * sx - 0.5, (y + 0.5) * sy - 0.5)
    }))
}

/// Rotation by `angle` radians about `center`: `p' = R(angle)(p − center) + center`.
///
/// With `y` pointing down, a positive angle turns the picture clockwise on
/// screen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    pub center: Point,
    pub angle: f64,
}

impl Rotation {
    pub fn apply(&self, p: Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        [c * dx - s * dy + self.center[0], s * dx + c * dy + self.center[1]]
    }

    pub fn inverse(&self) -> Rotation {
        Rotation { center: self.center, angle: -self.angle }
    }
}

/// Rotates the image in place on its own canvas, filling uncovered pixels black.
pub fn rotate(image: &Image, rot: Rotation) -> Image {
    let inv = rot.inverse();
    warp_image(image, image.height(), image.width(), Border::Fill(0.0), |x, y| {
        let p = inv.apply([x, y]);
        (p[0], p[1])
    })
}

/// Result of [`align_face`].
#[derive(Clone, Debug, PartialEq)]
pub struct Aligned {
    pub image: Image,
    pub rotation: Rotation,
}

impl Aligned {
    /// Maps a source landmark into the aligned image.
    pub fn map_point(&self, p: Point) -> Point {
        self.rotation.apply(p)
    }
}

/// Levels the eye line by rotating about the eye midpoint by `−atan2(Δy, Δx)`.
pub fn align_face(image: &Image, left_eye: Point, right_eye: Point) -> Result<Aligned, DataError> {
    let (dx, dy) = (right_eye[0] - left_eye[0], right_eye[1] - left_eye[1]);
    if dx == 0.0 && dy == 0.0 {
        return Err(DataError::Geometry("eye points coincide".into()));
    }
    let center = [(left_eye[0] + right_eye[0]) / 2.0, (left_eye[1] + right_eye[1]) / 2.0];
    let rotation = Rotation { center, angle: -dy.atan2(dx) };
    let image = if rotation.angle == 0.0 { image.clone() } else { rotate(image, rotation) };
    Ok(Aligned { image, rotation })
}

/// Axis-aligned pixel box: columns `x..x+w`, rows `y..y+h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: usize,
    pub h: usize,
}

/// Square crop around `bbox`, the shorter side grown symmetrically.
///
/// `margin` enlarges the square by that fraction of its side. Parts outside
/// the frame are zero.
pub fn crop_square(image: &Image, bbox: BBox, margin: f64) -> Result<Image, DataError> {
    if bbox.w == 0 || bbox.h == 0 {
        return Err(DataError::Geometry(format!("empty bounding box {bbox:?}")));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(DataError::Geometry(format!("crop margin {margin} must be non-negative")));
    }
    let side = (bbox.w.max(bbox.h) as f64 * (1.0 + margin)).round() as usize;
    let x0 = (2 * bbox.x + bbox.w as i64 - side as i64).div_euclid(2);
    let y0 = (2 * bbox.y + bbox.h as i64 - side as i64).div_euclid(2);
    let c = image.channels();
    let mut out = Image::zeros(c, side, side);
    for r in 0..side {
        let sy = y0 + r as i64;
        if sy < 0 || sy >= image.height() as i64 {
            continue;
        }
        for col in 0..side {
            let sx = x0 + col as i64;
            if sx < 0 || sx >= image.width() as i64 {
                continue;
            }
            for ch in 0..c {
                out.set(r, col, ch, image.get(sy as usize, sx as usize, ch));
            }
        }
    }
    Ok(out)
}
