//! Parametric cartoon faces with four geometric action units.
//!
//! | AU  | effect                                            |
//! |-----|---------------------------------------------------|
//! | AU1 | brows move up by `0.06·S·l/5`                     |
//! | AU2 | eye radius scales by `1 + 0.4·l/5`                |
//! | AU3 | lip corners rise by `0.08·S·l/5` (curved smile)   |
//! | AU4 | mouth opens by `0.10·S·l/5`                       |
//!
//! `S` is the image side and `l ∈ 0..=5` the intensity. Each subject has its
//! own head shape, placement, tone and feature spacing; a record with all
//! intensities 0 is exactly that subject's neutral face.

use rand::Rng;

use crate::rng::{stream, Concern};

use super::geometry::{BBox, Point};
use super::image::{to_u8, Image};
use super::manifest::{Landmarks, Manifest, SampleRecord};

pub const MAX_SYNTH_AUS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
    pub num_aus: usize,
    /// Probability of intensity 0 for each AU.
    pub p_zero: f64,
    /// Ratio between successive nonzero levels: `P(l = k) ∝ tail_q^(k-1)`.
    pub tail_q: f64,
    pub subjects: usize,
    /// First subject number, so separate corpora can use disjoint identities.
    pub subject_offset: usize,
}

impl SynthParams {
    pub fn new(seed: u64, count: usize, image_size: usize) -> Self {
        Self { seed, count, image_size, num_aus: 4, p_zero: 0.55, tail_q: 0.5, subjects: 20, subject_offset: 0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(1..=MAX_SYNTH_AUS).contains(&self.num_aus) {
            return Err(format!("synthetic corpus supports 1..={MAX_SYNTH_AUS} AUs, got {}", self.num_aus));
        }
        if self.image_size < 16 {
            return Err(format!("image size {} is too small to draw a face (minimum 16)", self.image_size));
        }
        if !(0.0..=1.0).contains(&self.p_zero) {
            return Err(format!("p_zero {} outside [0, 1]", self.p_zero));
        }
        if !(self.tail_q > 0.0 && self.tail_q.is_finite()) {
            return Err(format!("tail_q {} must be positive", self.tail_q));
        }
        if self.subjects == 0 {
            return Err("need at least one subject".into());
        }
        Ok(())
    }

    /// Probability of each intensity level 0..=5 for one AU.
    pub fn level_probabilities(&self) -> [f64; 6] {
        let mut p = [0.0; 6];
        p[0] = self.p_zero;
        let norm: f64 = (0..5).map(|k| self.tail_q.powi(k)).sum();
        for k in 1..6 {
            p[k] = (1.0 - self.p_zero) * self.tail_q.powi(k as i32 - 1) / norm;
        }
        p
    }
}

/// Per-subject appearance, in pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub id: String,
    center: Point,
    axes: [f64; 2],
    skin: f64,
    background: f64,
    eye_half_gap: f64,
    eye_y: f64,
    eye_radius: f64,
    brow_gap: f64,
    brow_half_len: f64,
    mouth_y: f64,
    mouth_half_w: f64,
}

impl Subject {
    pub fn generate(seed: u64, number: usize, size: usize) -> Self {
        let mut r = stream(seed, Concern::Synth, number as u64, 1);
        let s = size as f64;
        let mid = (s - 1.0) / 2.0;
        let mut j = |amp: f64| r.random_range(-amp..=amp);
        let center = [mid + j(0.04) * s, mid + j(0.03) * s];
        let axes = [0.36 * s * (1.0 + j(0.08)), 0.45 * s * (1.0 + j(0.06))];
        let skin = 170.0 + j(30.0);
        let background = 45.0 + j(15.0);
        let eye_half_gap = 0.17 * s * (1.0 + j(0.1));
        let eye_y = center[1] - 0.10 * s + j(0.02) * s;
        let eye_radius = 0.055 * s * (1.0 + j(0.1));
        let brow_gap = 0.09 * s * (1.0 + j(0.1));
        let brow_half_len = 0.07 * s * (1.0 + j(0.1));
        let mouth_y = center[1] + 0.20 * s + j(0.02) * s;
        let mouth_half_w = 0.12 * s * (1.0 + j(0.1));
        Self {
            id: format!("s{number:03}"),
            center,
            axes,
            skin,
            background,
            eye_half_gap,
            eye_y,
            eye_radius,
            brow_gap,
            brow_half_len,
            mouth_y,
            mouth_half_w,
        }
    }
}

/// Intensities for the four synthetic AUs (missing AUs count as 0).
fn level(levels: &[u8], au: usize) -> f64 {
    levels.get(au).copied().unwrap_or(0) as f64 / 5.0
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    /// Paints `value` with coverage `clamp(0.5 − d, 0, 1)` for signed distance `d`.
    fn paint(&mut self, value: f64, dist: impl Fn(f64, f64) -> f64) {
        for y in 0..self.size {
            for x in 0..self.size {
                let a = (0.5 - dist(x as f64, y as f64)).clamp(0.0, 1.0);
                if a > 0.0 {
                    let p = &mut self.px[y * self.size + x];
                    *p = *p * (1.0 - a) + value * a;
                }
            }
        }
    }
}

fn ellipse_dist(c: Point, ax: f64, ay: f64) -> impl Fn(f64, f64) -> f64 {
    move |x, y| {
        let (u, v) = ((x - c[0]) / ax, (y - c[1]) / ay);
        ((u * u + v * v).sqrt() - 1.0) * ax.min(ay)
    }
}

fn segment_dist(a: Point, b: Point, x: f64, y: f64) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((x - a[0]) * dx + (y - a[1]) * dy) / len2).clamp(0.0, 1.0) };
    let (px, py) = (a[0] + t * dx - x, a[1] + t * dy - y);
    (px * px + py * py).sqrt()
}

fn polyline_dist(pts: &[Point], half_width: f64) -> impl Fn(f64, f64) -> f64 + '_ {
    move |x, y| {
        pts.windows(2).map(|w| segment_dist(w[0], w[1], x, y)).fold(f64::INFINITY, f64::min) - half_width
    }
}

const INK: f64 = 25.0;

/// Draws one face; returns the image, its landmarks and the head box.
pub fn render_face(subject: &Subject, levels: &[u8], size: usize) -> (Image, Landmarks, BBox) {
    let s = size as f64;
    let sub = subject;
    let mut cv = Canvas { size, px: vec![sub.background; size * size] };
    cv.paint(sub.skin, ellipse_dist(sub.center, sub.axes[0], sub.axes[1]));

    let cx = sub.center[0];
    let eyes = [[cx - sub.eye_half_gap, sub.eye_y], [cx + sub.eye_half_gap, sub.eye_y]];
    let r_eye = sub.eye_radius * (1.0 + 0.4 * level(levels, 1));
    for e in eyes {
        cv.paint(INK, ellipse_dist(e, r_eye, r_eye));
    }

    let lift = 0.06 * s * level(levels, 0);
    let brow_w = (0.025 * s).max(1.0) / 2.0;
    for e in eyes {
        let y = e[1] - sub.brow_gap - lift;
        let (a, b) = ([e[0] - sub.brow_half_len, y], [e[0] + sub.brow_half_len, y]);
        cv.paint(INK, move |x, yy| segment_dist(a, b, x, yy) - brow_w);
    }

    let nose_top = [cx, sub.eye_y + 0.04 * s];
    let nose_tip = [cx, (sub.eye_y + sub.mouth_y) / 2.0 + 0.02 * s];
    let nose_w = (0.02 * s).max(0.75) / 2.0;
    cv.paint(sub.skin - 60.0, move |x, y| segment_dist(nose_top, nose_tip, x, y) - nose_w);

    let curve = 0.08 * s * level(levels, 2);
    let open = 0.10 * s * level(levels, 3);
    let (mx, my, hw) = (cx, sub.mouth_y, sub.mouth_half_w);
    let steps = 16;
    let upper: Vec<Point> = (0..=steps)
        .map(|i| {
            let u = -1.0 + 2.0 * i as f64 / steps as f64;
            [mx + u * hw, my - curve * u * u]
        })
        .collect();
    let lower: Vec<Point> = upper
        .iter()
        .map(|p| {
            let u = (p[0] - mx) / hw;
            [p[0], p[1] + open * (1.0 - u * u)]
        })
        .collect();
    let lip_w = (0.03 * s).max(1.0) / 2.0;
    if open > 0.0 {
        let (up, lo) = (upper.clone(), lower.clone());
        cv.paint(INK, move |x, y| {
            let u = (x - mx) / hw;
            if u.abs() > 1.0 {
                return f64::INFINITY;
            }
            let top = my - curve * u * u;
            let bottom = top + open * (1.0 - u * u);
            if y >= top && y <= bottom {
                -1.0
            } else {
                polyline_dist(&up, 0.0)(x, y).min(polyline_dist(&lo, 0.0)(x, y))
            }
        });
        cv.paint(INK, polyline_dist(&lower, lip_w));
    }
    cv.paint(INK, polyline_dist(&upper, lip_w));

    let data = cv.px.iter().map(|&v| to_u8(v as f32)).collect();
    let image = Image::new(1, size, size, data).expect("valid canvas");
    let clamp = |p: Point| [p[0].clamp(0.0, s - 1.0), p[1].clamp(0.0, s - 1.0)];
    let landmarks = [
        clamp(eyes[0]),
        clamp(eyes[1]),
        clamp(nose_tip),
        clamp([mx - hw, my - curve]),
        clamp([mx + hw, my - curve]),
    ];
    let x0 = (sub.center[0] - sub.axes[0]).floor().max(0.0);
    let y0 = (sub.center[1] - sub.axes[1]).floor().max(0.0);
    let x1 = (sub.center[0] + sub.axes[0]).ceil().min(s - 1.0);
    let y1 = (sub.center[1] + sub.axes[1]).ceil().min(s - 1.0);
    let bbox = BBox { x: x0 as i64, y: y0 as i64, w: (x1 - x0) as usize + 1, h: (y1 - y0) as usize + 1 };
    (image, landmarks, bbox)
}

pub fn sample_level<R: Rng + ?Sized>(probs: &[f64; 6], rng: &mut R) -> u8 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k as u8;
        }
    }
    5
}

/// A generated corpus; `images[i]` belongs to `manifest.records[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub images: Vec<Image>,
}

pub fn au_names(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("AU{i}")).collect()
}

/// Deterministic corpus of `count` faces.
pub fn synth_corpus(params: &SynthParams) -> Result<SynthCorpus, String> {
    params.validate()?;
    let size = params.image_size;
    let subjects: Vec<Subject> = (0..params.subjects)
        .map(|k| Subject::generate(params.seed, params.subject_offset + k, size))
        .collect();
    let probs = params.level_probabilities();
    let mut rng = stream(params.seed, Concern::Synth, 0, 0);
    let mut frames = vec![0u64; params.subjects];
    let mut manifest = Manifest::new("synthetic", au_names(params.num_aus));
    manifest.image_size = Some([size, size]);
    let mut images = Vec::with_capacity(params.count);
    for i in 0..params.count {
        let k = rng.random_range(0..params.subjects);
        let levels: Vec<u8> = (0..params.num_aus).map(|_| sample_level(&probs, &mut rng)).collect();
        let (image, landmarks, bbox) = render_face(&subjects[k], &levels, size);
        let mut rec = SampleRecord::new(format!("img_{i:06}.pgm"), subjects[k].id.clone(), frames[k]);
        frames[k] += 1;
        rec.landmarks = Some(landmarks);
        rec.bbox = Some(bbox);
        rec.occurrence = Some(levels.iter().map(|&l| (l > 0) as u8).collect());
        rec.intensity = Some(levels);
        manifest.records.push(rec);
        images.push(image);
    }
    Ok(SynthCorpus { manifest, images })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let p = SynthParams::new(3, 40, 32);
        let a = synth_corpus(&p).unwrap();
        assert_eq!(a, synth_corpus(&p).unwrap());
        assert_ne!(a.images, synth_corpus(&SynthParams { seed: 4, ..p.clone() }).unwrap().images);
        a.manifest.validate().unwrap();
        for (r, img) in a.manifest.records.iter().zip(&a.images) {
            assert_eq!((img.height(), img.width()), (32, 32));
            let occ: Vec<u8> = r.intensity.as_ref().unwrap().iter().map(|&l| (l > 0) as u8).collect();
            assert_eq!(r.occurrence.as_ref().unwrap(), &occ);
        }
    }

    #[test]
    fn neutral_records_match_the_template() {
        let subject = Subject::generate(9, 2, 32);
        let (neutral, ..) = render_face(&subject, &[0, 0, 0, 0], 32);
        assert_eq!(render_face(&subject, &[], 32).0, neutral);
        for au in 0..4 {
            let mut l = [0u8; 4];
            l[au] = 5;
            assert_ne!(render_face(&subject, &l, 32).0, neutral, "AU{} has no visible effect", au + 1);
        }
    }

    #[test]
    fn level_distribution() {
        let p = SynthParams::new(0, 0, 32).level_probabilities();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p[0], 0.55);
        assert!((p[1] / p[2] - 2.0).abs() < 1e-12);
    }
}
