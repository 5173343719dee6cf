//! Corpus cleaning and frame subsampling.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::image::read_image;
use super::manifest::{image_path, Manifest};
use super::DataError;

pub const MIN_SIDE: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DropReason {
    /// File missing or unreadable.
    Unreadable(String),
    /// Not a valid image file (bad magic, truncated payload, ...).
    Corrupt(String),
    TooSmall { height: usize, width: usize },
}

impl DropReason {
    pub fn code(&self) -> &'static str {
        match self {
            DropReason::Unreadable(_) => "unreadable",
            DropReason::Corrupt(_) => "corrupt",
            DropReason::TooSmall { .. } => "too_small",
        }
    }

    pub fn detail(&self) -> String {
        match self {
            DropReason::Unreadable(m) | DropReason::Corrupt(m) => m.clone(),
            DropReason::TooSmall { height, width } => format!("{width}x{height}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dropped {
    pub index: usize,
    pub image: String,
    pub reason: DropReason,
}

/// Keeps records whose image decodes and has `min(H, W) >= min_side`.
pub fn clean_filter(manifest: &Manifest, manifest_path: &Path, min_side: usize) -> (Manifest, Vec<Dropped>) {
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (index, r) in manifest.records.iter().enumerate() {
        let reason = match read_image(&image_path(manifest_path, r)) {
            Err(DataError::Io { source, .. }) => Some(DropReason::Unreadable(source.to_string())),
            Err(e) => Some(DropReason::Corrupt(e.to_string())),
            Ok(img) if img.height().min(img.width()) < min_side => {
                Some(DropReason::TooSmall { height: img.height(), width: img.width() })
            }
            Ok(_) => None,
        };
        match reason {
            Some(reason) => dropped.push(Dropped { index, image: r.image.clone(), reason }),
            None => kept.push(r.clone()),
        }
    }
    (manifest.with_records(kept), dropped)
}

/// CSV drop report: `index,image,reason,detail`.
pub fn drop_report_csv(dropped: &[Dropped]) -> String {
    let mut out = String::from("index,image,reason,detail\n");
    for d in dropped {
        let detail = d.reason.detail().replace('"', "'");
        writeln!(out, "{},{},{},\"{}\"", d.index, d.image, d.reason.code(), detail).unwrap();
    }
    out
}

/// Keeps every `n`-th frame of each subject (positions 0, n, 2n, ... in frame order).
///
/// Surviving records keep their manifest order.
pub fn subsample_every_n(manifest: &Manifest, n: usize) -> Result<Manifest, DataError> {
    if n < 1 {
        return Err(DataError::Geometry("subsampling step must be at least 1".into()));
    }
    let mut by_subject: BTreeMap<&str, Vec<(u64, usize)>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_subject.entry(&r.subject).or_default().push((r.frame, i));
    }
    let mut keep = HashSet::new();
    for frames in by_subject.values_mut() {
        frames.sort_unstable();
        keep.extend(frames.iter().step_by(n).map(|&(_, i)| i));
    }
    let records = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(i, _)| keep.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    Ok(manifest.with_records(records))
}
