//! F1, ICC(3,1), MSE/MAE, label statistics and subject-exclusive folds.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::data::Manifest;
use crate::rng::{stream, Concern};
use crate::vitmae::Task;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no samples to evaluate")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0}")]
    Invalid(String),
}

fn check_shapes<A, B>(pred: &[Vec<A>], gt: &[Vec<B>]) -> Result<usize, MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::Empty);
    }
    if pred.len() != gt.len() {
        return Err(MetricsError::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    let n = gt[0].len();
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != n || g.len() != n {
            return Err(MetricsError::Shape(format!(
                "sample {i}: {} predicted and {} true values, expected {n}",
                p.len(),
                g.len()
            )));
        }
    }
    Ok(n)
}

/// Pooled confusion counts and F1 for one AU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Score {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub f1: f64,
    /// No positives in either predictions or labels; `f1` is then 0.
    pub degenerate: bool,
}

/// Per-AU F1 from thresholded predictions, pooled over samples.
pub fn f1_scores(pred: &[Vec<u8>], gt: &[Vec<u8>]) -> Result<Vec<F1Score>, MetricsError> {
    let n = check_shapes(pred, gt)?;
    let mut out = Vec::with_capacity(n);
    for au in 0..n {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for (p, g) in pred.iter().zip(gt) {
            match (p[au] != 0, g[au] != 0) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        let degenerate = tp + fp + fn_ == 0;
        let f1 = if degenerate { 0.0 } else { 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64 };
        out.push(F1Score { tp, fp, fn_, tn, f1, degenerate });
    }
    Ok(out)
}

pub fn threshold(probs: &[Vec<f64>], t: f64) -> Vec<Vec<u8>> {
    probs.iter().map(|row| row.iter().map(|&p| (p >= t) as u8).collect()).collect()
}

fn centered_sq(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    values.map(|v| (v - mean) * (v - mean)).sum()
}

/// Two-rater consistency ICC(3,1); `None` when both raters are constant.
///
/// With `s = x + y` and `d = x − y`, the between-target and residual mean
/// squares reduce to `var(s)/2` and `var(d)/2`.
pub fn icc31(pred: &[f64], gt: &[f64]) -> Result<Option<f64>, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if pred.len() < 2 {
        return Err(MetricsError::Invalid(format!("ICC needs at least 2 samples, got {}", pred.len())));
    }
    let ss = centered_sq(pred.iter().zip(gt).map(|(x, y)| x + y));
    let sd = centered_sq(pred.iter().zip(gt).map(|(x, y)| x - y));
    if ss + sd == 0.0 {
        return Ok(None);
    }
    Ok(Some((ss - sd) / (ss + sd)))
}

/// Mean squared and mean absolute error per AU.
pub fn mse_mae(pred: &[Vec<f64>], gt: &[Vec<u8>]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let n = check_shapes(pred, gt)?;
    let count = pred.len() as f64;
    Ok((0..n)
        .map(|au| {
            let (mut se, mut ae) = (0.0, 0.0);
            for (p, g) in pred.iter().zip(gt) {
                let e = p[au] - g[au] as f64;
                se += e * e;
                ae += e.abs();
            }
            (se / count, ae / count)
        })
        .collect())
}

/// One metric across AUs; `None` marks an undefined value.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricColumn {
    pub name: String,
    pub per_au: Vec<Option<f64>>,
    pub degenerate: Vec<bool>,
}

impl MetricColumn {
    fn new(name: &str, per_au: Vec<Option<f64>>, degenerate: Vec<bool>) -> Self {
        Self { name: name.into(), per_au, degenerate }
    }

    /// Mean over defined per-AU values.
    pub fn average(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_au.iter().flatten().copied().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub dataset: String,
    pub fold: Option<usize>,
    pub threshold: Option<f64>,
    pub samples: usize,
    pub au_names: Vec<String>,
    pub columns: Vec<MetricColumn>,
    /// How cross-fold numbers were combined, when this is a summary.
    pub pooling: Option<String>,
}

impl MetricsReport {
    pub fn column(&self, name: &str) -> Option<&MetricColumn> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn average(&self, name: &str) -> Option<f64> {
        self.column(name).and_then(|c| c.average())
    }

    fn meta(&self) -> String {
        let mut s = format!("task={} dataset={} samples={}", self.task, self.dataset, self.samples);
        if let Some(f) = self.fold {
            write!(s, " fold={f}").unwrap();
        }
        if let Some(t) = self.threshold {
            write!(s, " threshold={t}").unwrap();
        }
        if let Some(p) = &self.pooling {
            write!(s, " pooling={p}").unwrap();
        }
        s
    }

    /// One row per AU plus an `Avg.` row; undefined values are written as `null`.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# {}\nau", self.meta());
        for c in &self.columns {
            write!(out, ",{}", c.name).unwrap();
        }
        out.push_str(",flags\n");
        let fmt = |v: Option<f64>| v.map_or("null".to_string(), |v| format!("{v:.6}"));
        for (i, au) in self.au_names.iter().enumerate() {
            out.push_str(au);
            let mut flags = Vec::new();
            for c in &self.columns {
                write!(out, ",{}", fmt(c.per_au[i])).unwrap();
                if c.degenerate[i] {
                    flags.push(format!("{}:degenerate", c.name));
                }
            }
            writeln!(out, ",{}", flags.join(";")).unwrap();
        }
        out.push_str("Avg.");
        for c in &self.columns {
            write!(out, ",{}", fmt(c.average())).unwrap();
        }
        out.push_str(",\n");
        out
    }

    /// Aligned table with AU columns and `Avg.` last; F1 is shown in percent.
    pub fn to_table(&self) -> String {
        let width = self.au_names.iter().map(|n| n.len()).max().unwrap_or(4).max(7);
        let mut out = format!("{}\n{:<8}", self.meta(), "metric");
        for au in &self.au_names {
            write!(out, " {au:>width$}").unwrap();
        }
        writeln!(out, " {:>width$}", "Avg.").unwrap();
        for c in &self.columns {
            let cell = |v: Option<f64>, flag: bool| match v {
                None => "null".to_string(),
                Some(v) if c.name == "f1" => format!("{:.1}{}", 100.0 * v, if flag { "*" } else { "" }),
                Some(v) => format!("{v:.3}"),
            };
            write!(out, "{:<8}", c.name).unwrap();
            for i in 0..self.au_names.len() {
                write!(out, " {:>width$}", cell(c.per_au[i], c.degenerate[i])).unwrap();
            }
            writeln!(out, " {:>width$}", cell(c.average(), false)).unwrap();
        }
        if self.columns.iter().any(|c| c.degenerate.iter().any(|&d| d)) {
            out.push_str("* degenerate (no positives in predictions or labels); counted as 0 / excluded if null\n");
        }
        out
    }
}

/// Detection report from sigmoid probabilities.
pub fn detection_report(
    probs: &[Vec<f64>],
    gt: &[Vec<u8>],
    au_names: &[String],
    threshold_at: f64,
) -> Result<MetricsReport, MetricsError> {
    let scores = f1_scores(&threshold(probs, threshold_at), gt)?;
    check_names(au_names, scores.len())?;
    Ok(MetricsReport {
        task: Task::Detect,
        dataset: String::new(),
        fold: None,
        threshold: Some(threshold_at),
        samples: probs.len(),
        au_names: au_names.to_vec(),
        columns: vec![MetricColumn::new(
            "f1",
            scores.iter().map(|s| Some(s.f1)).collect(),
            scores.iter().map(|s| s.degenerate).collect(),
        )],
        pooling: None,
    })
}

/// Intensity report from predictions already on the 0–5 scale.
pub fn intensity_report(pred: &[Vec<f64>], gt: &[Vec<u8>], au_names: &[String]) -> Result<MetricsReport, MetricsError> {
    let errs = mse_mae(pred, gt)?;
    check_names(au_names, errs.len())?;
    let mut icc = Vec::with_capacity(errs.len());
    for au in 0..errs.len() {
        let p: Vec<f64> = pred.iter().map(|r| r[au]).collect();
        let g: Vec<f64> = gt.iter().map(|r| r[au] as f64).collect();
        icc.push(icc31(&p, &g)?);
    }
    let nulls: Vec<bool> = icc.iter().map(|v| v.is_none()).collect();
    let none = vec![false; errs.len()];
    Ok(MetricsReport {
        task: Task::Intensity,
        dataset: String::new(),
        fold: None,
        threshold: None,
        samples: pred.len(),
        au_names: au_names.to_vec(),
        columns: vec![
            MetricColumn::new("icc", icc, nulls),
            MetricColumn::new("mse", errs.iter().map(|e| Some(e.0)).collect(), none.clone()),
            MetricColumn::new("mae", errs.iter().map(|e| Some(e.1)).collect(), none),
        ],
        pooling: None,
    })
}

fn check_names(names: &[String], n: usize) -> Result<(), MetricsError> {
    if names.len() != n {
        return Err(MetricsError::Shape(format!("{} AU names for {n} outputs", names.len())));
    }
    Ok(())
}

/// Mean of per-fold per-AU values (folds are not pooled frame-wise).
pub fn fold_average(reports: &[MetricsReport]) -> Result<MetricsReport, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    let mut columns = Vec::new();
    for (ci, c) in first.columns.iter().enumerate() {
        let mut per_au = Vec::new();
        let mut degenerate = Vec::new();
        for au in 0..c.per_au.len() {
            let vals: Vec<f64> = reports.iter().filter_map(|r| r.columns[ci].per_au[au]).collect();
            per_au.push((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64));
            degenerate.push(reports.iter().any(|r| r.columns[ci].degenerate[au]));
        }
        columns.push(MetricColumn { name: c.name.clone(), per_au, degenerate });
    }
    Ok(MetricsReport {
        fold: None,
        samples: reports.iter().map(|r| r.samples).sum(),
        columns,
        pooling: Some(format!("mean-of-{}-folds", reports.len())),
        ..first.clone()
    })
}

/// Distribution of AU labels in a manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelStats {
    pub au_names: Vec<String>,
    pub labeled: usize,
    pub unlabeled: usize,
    pub positives: Vec<usize>,
    /// `(active AU indices, count)` sorted by count, most frequent first.
    pub combinations: Vec<(Vec<usize>, usize)>,
}

impl LabelStats {
    pub fn positive_rates(&self) -> Vec<f64> {
        self.positives.iter().map(|&p| p as f64 / self.labeled.max(1) as f64).collect()
    }

    pub fn combination_count(&self) -> usize {
        self.combinations.len()
    }

    /// Fraction of distinct combinations with fewer than `n` samples.
    pub fn fraction_below(&self, n: usize) -> f64 {
        let k = self.combinations.iter().filter(|(_, c)| *c < n).count();
        k as f64 / self.combinations.len().max(1) as f64
    }

    pub fn fraction_above(&self, n: usize) -> f64 {
        let k = self.combinations.iter().filter(|(_, c)| *c > n).count();
        k as f64 / self.combinations.len().max(1) as f64
    }

    pub fn combination_label(&self, set: &[usize]) -> String {
        if set.is_empty() {
            "(none)".into()
        } else {
            set.iter().map(|&i| self.au_names[i].as_str()).collect::<Vec<_>>().join("+")
        }
    }

    pub fn rates_csv(&self) -> String {
        let mut out = String::from("au,positives,rate\n");
        for (i, rate) in self.positive_rates().iter().enumerate() {
            writeln!(out, "{},{},{rate:.6}", self.au_names[i], self.positives[i]).unwrap();
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("combination,count\n");
        for (set, count) in &self.combinations {
            writeln!(out, "{},{count}", self.combination_label(set)).unwrap();
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("records={} unlabeled={}\n", self.labeled, self.unlabeled);
        for (i, rate) in self.positive_rates().iter().enumerate() {
            writeln!(out, "{:<8} {:>7} {:>7.1}%", self.au_names[i], self.positives[i], 100.0 * rate).unwrap();
        }
        writeln!(
            out,
            "combinations={} with<50={:.1}% with>1000={:.1}%",
            self.combination_count(),
            100.0 * self.fraction_below(50),
            100.0 * self.fraction_above(1000)
        )
        .unwrap();
        for (set, count) in self.combinations.iter().take(10) {
            writeln!(out, "  {:<24} {count}", self.combination_label(set)).unwrap();
        }
        out
    }
}

pub fn label_stats(manifest: &Manifest) -> LabelStats {
    let n = manifest.num_aus();
    let mut positives = vec![0; n];
    let mut hist: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let (mut labeled, mut unlabeled) = (0, 0);
    for r in &manifest.records {
        let Some(bits) = r.occurrence_bits() else {
            unlabeled += 1;
            continue;
        };
        labeled += 1;
        let set: Vec<usize> = (0..n).filter(|&i| bits[i] != 0).collect();
        for &i in &set {
            positives[i] += 1;
        }
        *hist.entry(set).or_default() += 1;
    }
    let mut combinations: Vec<(Vec<usize>, usize)> = hist.into_iter().collect();
    combinations.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    LabelStats { au_names: manifest.au_names.clone(), labeled, unlabeled, positives, combinations }
}

/// Subject-exclusive fold assignment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Folds {
    /// Subjects of each fold, sorted.
    pub folds: Vec<Vec<String>>,
}

impl Folds {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    pub fn fold_of(&self, subject: &str) -> Option<usize> {
        self.folds.iter().position(|f| f.binary_search_by(|s| s.as_str().cmp(subject)).is_ok())
    }

    /// `(train, test)` with fold `k` held out.
    pub fn split(&self, manifest: &Manifest, k: usize) -> Result<(Manifest, Manifest), MetricsError> {
        if k >= self.k() {
            return Err(MetricsError::Invalid(format!("fold {k} out of range (k = {})", self.k())));
        }
        let (test, train): (Vec<_>, Vec<_>) =
            manifest.records.iter().cloned().partition(|r| self.fold_of(&r.subject) == Some(k));
        Ok((manifest.with_records(train), manifest.with_records(test)))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("subject,fold\n");
        let mut rows: Vec<(&str, usize)> =
            self.folds.iter().enumerate().flat_map(|(k, f)| f.iter().map(move |s| (s.as_str(), k))).collect();
        rows.sort();
        for (s, k) in rows {
            writeln!(out, "{s},{k}").unwrap();
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut folds: Vec<Vec<String>> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let (s, k) = line
                .rsplit_once(',')
                .ok_or_else(|| MetricsError::Invalid(format!("fold file line {}: expected subject,fold", i + 1)))?;
            let k: usize =
                k.trim().parse().map_err(|_| MetricsError::Invalid(format!("fold file line {}: bad fold", i + 1)))?;
            if folds.len() <= k {
                folds.resize(k + 1, Vec::new());
            }
            folds[k].push(s.to_string());
        }
        folds.iter_mut().for_each(|f| f.sort());
        Ok(Self { folds })
    }
}

/// Shuffles the distinct subjects with the run seed and deals them round robin.
pub fn kfold_by_subject(manifest: &Manifest, k: usize, seed: u64) -> Result<Folds, MetricsError> {
    let mut subjects = manifest.subjects();
    if k < 2 {
        return Err(MetricsError::Invalid(format!("k must be at least 2, got {k}")));
    }
    if subjects.len() < k {
        return Err(MetricsError::Invalid(format!("{} subjects cannot fill {k} folds", subjects.len())));
    }
    subjects.sort();
    subjects.shuffle(&mut stream(seed, Concern::Split, k as u64, 0));
    let mut folds = vec![Vec::new(); k];
    for (i, s) in subjects.into_iter().enumerate() {
        folds[i % k].push(s);
    }
    folds.iter_mut().for_each(|f| f.sort());
    Ok(Folds { folds })
}
