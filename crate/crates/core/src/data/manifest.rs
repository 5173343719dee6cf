//! Newline-delimited JSON manifests.
//!
//! Line 1 is a header object:
//!
//! ```text
//! {"format":"maeface-manifest","version":1,"dataset":"...","au_names":["AU1",...],"image_size":[h,w]}
//! ```
//!
//! Every further line is one [`SampleRecord`]. Image paths are relative to
//! the manifest's directory. Fields this crate does not know are kept and
//! written back unchanged.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::geometry::{BBox, Point};
use super::DataError;

pub const FORMAT: &str = "maeface-manifest";
pub const VERSION: u32 = 1;

/// Left eye, right eye, nose tip, left and right mouth corner.
pub type Landmarks = [Point; 5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub subject: String,
    pub frame: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<Landmarks>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub occurrence: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<Vec<u8>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl SampleRecord {
    pub fn new(image: impl Into<String>, subject: impl Into<String>, frame: u64) -> Self {
        Self {
            image: image.into(),
            subject: subject.into(),
            frame,
            landmarks: None,
            bbox: None,
            occurrence: None,
            intensity: None,
            extra: Map::new(),
        }
    }

    /// Occurrence bits, falling back to `intensity > 0`.
    pub fn occurrence_bits(&self) -> Option<Vec<u8>> {
        self.occurrence
            .clone()
            .or_else(|| self.intensity.as_ref().map(|l| l.iter().map(|&v| (v > 0) as u8).collect()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    dataset: String,
    au_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_size: Option<[usize; 2]>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dataset: String,
    pub au_names: Vec<String>,
    /// `[height, width]` shared by all images, when known.
    pub image_size: Option<[usize; 2]>,
    pub records: Vec<SampleRecord>,
    pub extra: Map<String, Value>,
}

impl Manifest {
    pub fn new(dataset: impl Into<String>, au_names: Vec<String>) -> Self {
        Self { dataset: dataset.into(), au_names, image_size: None, records: Vec::new(), extra: Map::new() }
    }

    pub fn num_aus(&self) -> usize {
        self.au_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Same header, different records.
    pub fn with_records(&self, records: Vec<SampleRecord>) -> Self {
        Self { records, ..self.clone() }
    }

    pub fn has_intensity(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.intensity.is_some())
    }

    pub fn has_occurrence(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.occurrence_bits().is_some())
    }

    /// Distinct subjects in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records.iter().filter(|r| seen.insert(r.subject.clone())).map(|r| r.subject.clone()).collect()
    }

    /// Checks one record; `line` is used for error messages.
    fn check_record(&self, r: &SampleRecord, line: usize) -> Result<(), DataError> {
        let bad = |message: String| DataError::Manifest { line, message };
        let n = self.num_aus();
        if let Some(occ) = &r.occurrence {
            if occ.len() != n {
                return Err(bad(format!("{} occurrence labels, expected {n} (one per AU in the header)", occ.len())));
            }
            if let Some(v) = occ.iter().find(|&&v| v > 1) {
                return Err(bad(format!("occurrence value {v} is not 0 or 1")));
            }
        }
        if let Some(int) = &r.intensity {
            if int.len() != n {
                return Err(bad(format!("{} intensity labels, expected {n} (one per AU in the header)", int.len())));
            }
            if let Some(v) = int.iter().find(|&&v| v > 5) {
                return Err(bad(format!("intensity value {v} outside 0..=5")));
            }
        }
        if let (Some(lm), Some([h, w])) = (&r.landmarks, self.image_size) {
            for p in lm {
                if !(p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (w - 1) as f64 && p[1] <= (h - 1) as f64) {
                    return Err(bad(format!("landmark {p:?} lies outside the {w}x{h} image")));
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut keys = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            self.check_record(r, i + 2)?;
            if !keys.insert((r.subject.as_str(), r.frame)) {
                return Err(DataError::Manifest {
                    line: i + 2,
                    message: format!("duplicate (subject {:?}, frame {})", r.subject, r.frame),
                });
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String, DataError> {
        self.validate()?;
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            dataset: self.dataset.clone(),
            au_names: self.au_names.clone(),
            image_size: self.image_size,
            extra: self.extra.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("serializable header");
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable record"));
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or(DataError::Manifest { line: 1, message: "missing header".into() })?;
        let header: Header = serde_json::from_str(first)
            .map_err(|e| DataError::Manifest { line: 1, message: format!("bad header: {e}") })?;
        if header.format != FORMAT {
            return Err(DataError::Manifest {
                line: 1,
                message: format!("format {:?}, expected {FORMAT:?}", header.format),
            });
        }
        if header.version != VERSION {
            return Err(DataError::Manifest {
                line: 1,
                message: format!("manifest version {} (this build reads {VERSION})", header.version),
            });
        }
        let mut m = Manifest {
            dataset: header.dataset,
            au_names: header.au_names,
            image_size: header.image_size,
            records: Vec::new(),
            extra: header.extra,
        };
        let mut keys = HashSet::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let r: SampleRecord = serde_json::from_str(line)
                .map_err(|e| DataError::Manifest { line: line_no, message: e.to_string() })?;
            m.check_record(&r, line_no)?;
            if !keys.insert((r.subject.clone(), r.frame)) {
                return Err(DataError::Manifest {
                    line: line_no,
                    message: format!("duplicate (subject {:?}, frame {})", r.subject, r.frame),
                });
            }
            m.records.push(r);
        }
        Ok(m)
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    Manifest::from_jsonl(&text).map_err(|e| e.at(path))
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<(), DataError> {
    let text = manifest.to_jsonl()?;
    fs::write(path, text).map_err(|e| DataError::io(path, e))
}

/// Absolute location of a record's image given the manifest path.
pub fn image_path(manifest_path: &Path, record: &SampleRecord) -> PathBuf {
    let p = Path::new(&record.image);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}
