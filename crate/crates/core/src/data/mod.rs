//! Images, manifests, face geometry and the synthetic corpus.

mod clean;
mod geometry;
mod image;
mod manifest;
mod synth;

use std::path::{Path, PathBuf};

pub use clean::{clean_filter, drop_report_csv, subsample_every_n, DropReason, Dropped, MIN_SIDE};
pub use geometry::{
    align_face, crop_square, resize_bilinear, rotate, sample_bilinear, warp_planes, Aligned, BBox, Border, Point,
    Rotation,
};
pub use image::{decode_pnm, encode_pnm, read_image, write_image, Image};
pub use manifest::{image_path, read_manifest, write_manifest, Landmarks, Manifest, SampleRecord};
pub use synth::{au_names, render_face, sample_level, synth_corpus, Subject, SynthCorpus, SynthParams, MAX_SYNTH_AUS};

use crate::ndgrad::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("unsupported image format: magic {found:?} (expected \"P5\" binary PGM or \"P6\" binary PPM)")]
    UnsupportedFormat { found: String },
    #[error("truncated image payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid image: {0}")]
    Image(String),
    #[error("{0}")]
    Geometry(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("{path}: {source}")]
    InFile { path: PathBuf, source: Box<DataError> },
}

impl DataError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }

    pub(crate) fn at(self, path: &Path) -> Self {
        DataError::InFile { path: path.to_path_buf(), source: Box::new(self) }
    }
}

/// Reads every record's image.
pub fn load_images(manifest: &Manifest, manifest_path: &Path) -> Result<Vec<Image>, DataError> {
    manifest.records.iter().map(|r| read_image(&image_path(manifest_path, r))).collect()
}

/// Model input: `[channels, size, size]` in [0, 1].
pub fn to_model_input(image: &Image, size: usize, channels: usize) -> Result<Tensor<f32>, DataError> {
    let img = image.with_channels(channels)?;
    let img = if img.height() != size || img.width() != size { resize_bilinear(&img, size, size)? } else { img };
    Ok(img.to_tensor())
}

/// Align on the eyes, square-crop the (rotated) face box, resize to `size`.
///
/// Without landmarks the alignment step is skipped; without a box the whole
/// frame is used.
pub fn preprocess(image: &Image, record: &SampleRecord, margin: f64, size: usize) -> Result<Image, DataError> {
    let (aligned, rot) = match &record.landmarks {
        Some(lm) => {
            let a = align_face(image, lm[0], lm[1])?;
            (a.image, Some(a.rotation))
        }
        None => (image.clone(), None),
    };
    let bbox = match (record.bbox, rot) {
        (Some(b), Some(r)) if r.angle != 0.0 => {
            let corners = [
                [b.x as f64, b.y as f64],
                [(b.x + b.w as i64 - 1) as f64, b.y as f64],
                [b.x as f64, (b.y + b.h as i64 - 1) as f64],
                [(b.x + b.w as i64 - 1) as f64, (b.y + b.h as i64 - 1) as f64],
            ]
            .map(|p| r.apply(p));
            let x0 = corners.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor();
            let y0 = corners.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor();
            let x1 = corners.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max).ceil();
            let y1 = corners.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max).ceil();
            BBox { x: x0 as i64, y: y0 as i64, w: (x1 - x0) as usize + 1, h: (y1 - y0) as usize + 1 }
        }
        (Some(b), _) => b,
        (None, _) => BBox { x: 0, y: 0, w: image.width(), h: image.height() },
    };
    let square = crop_square(&aligned, bbox, margin)?;
    resize_bilinear(&square, size, size)
}
