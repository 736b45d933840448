//! Radial errors in millimetres, PCK, outlier rates, fold aggregation and
//! report export.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::imaging::LandmarkSet;
use crate::{Error, Result};

/// PCK radii in millimetres.
pub const PCK_RADII_MM: [f64; 4] = [1.0, 1.5, 2.0, 2.5];
/// Errors strictly above this distance are outliers.
pub const OUTLIER_MM: f64 = 10.0;

/// Landmark IDs scored during model selection.
pub const ABLATION_SUBSET: [usize; 4] = [0, 8, 9, 15];
/// Landmark IDs scored on held-out test data.
pub const TEST_SUBSET: [usize; 6] = [0, 4, 8, 9, 12, 15];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Ablation,
    Test,
    All,
    Custom(Vec<usize>),
}

impl Subset {
    pub fn ids(&self, landmarks: usize) -> Vec<usize> {
        match self {
            Subset::Ablation => ABLATION_SUBSET.to_vec(),
            Subset::Test => TEST_SUBSET.to_vec(),
            Subset::All => (0..landmarks).collect(),
            Subset::Custom(ids) => ids.clone(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Subset::Ablation => "ablation".into(),
            Subset::Test => "test".into(),
            Subset::All => "all".into(),
            Subset::Custom(ids) => ids
                .iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join("+"),
        }
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ablation" => Ok(Subset::Ablation),
            "test" => Ok(Subset::Test),
            "all" => Ok(Subset::All),
            other => {
                let ids = other
                    .split(['+', ','])
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| {
                        Error::InvalidArgument(format!("unknown landmark subset '{other}'"))
                    })?;
                Ok(Subset::Custom(ids))
            }
        }
    }
}

/// Euclidean distance between corresponding landmarks, scaled to millimetres.
pub fn radial_errors(pred: &LandmarkSet, gt: &LandmarkSet, spacing_mm: f64) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted landmarks vs {} ground-truth landmarks",
            pred.len(),
            gt.len()
        )));
    }
    if pred.frame() != gt.frame() {
        return Err(Error::InvalidArgument(format!(
            "landmark frames differ: {:?} vs {:?}",
            pred.frame(),
            gt.frame()
        )));
    }
    Ok(pred
        .points()
        .iter()
        .zip(gt.points())
        .map(|(p, g)| p.distance(*g) * spacing_mm)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub kl: Option<u8>,
    pub dataset: String,
}

/// Per-image, per-landmark radial errors (row-major, one row per image).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMatrix {
    landmarks: usize,
    images: Vec<ImageInfo>,
    errors: Vec<f64>,
}

impl ErrorMatrix {
    pub fn new(landmarks: usize) -> Self {
        Self {
            landmarks,
            images: Vec::new(),
            errors: Vec::new(),
        }
    }

    pub fn push(&mut self, info: ImageInfo, errors: &[f64]) -> Result<()> {
        if errors.len() != self.landmarks {
            return Err(Error::Shape(format!(
                "image {} has {} errors, expected {}",
                info.id,
                errors.len(),
                self.landmarks
            )));
        }
        if let Some(e) = errors.iter().find(|e| !(e.is_finite() && **e >= 0.0)) {
            return Err(Error::Range(format!(
                "radial error {e} for image {}",
                info.id
            )));
        }
        self.images.push(info);
        self.errors.extend_from_slice(errors);
        Ok(())
    }

    pub fn landmarks(&self) -> usize {
        self.landmarks
    }

    pub fn images(&self) -> &[ImageInfo] {
        &self.images
    }

    pub fn rows(&self) -> usize {
        self.images.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.errors[i * self.landmarks..(i + 1) * self.landmarks]
    }

    /// Rows whose KL grade equals `kl`.
    pub fn with_kl(&self, kl: u8) -> Self {
        let mut out = Self::new(self.landmarks);
        for (i, info) in self.images.iter().enumerate() {
            if info.kl == Some(kl) {
                out.images.push(info.clone());
                out.errors.extend_from_slice(self.row(i));
            }
        }
        out
    }

    fn subset_values(&self, subset: &[usize]) -> Result<Vec<f64>> {
        if subset.is_empty() {
            return Err(Error::InvalidArgument("empty landmark subset".into()));
        }
        if let Some(&l) = subset.iter().find(|&&l| l >= self.landmarks) {
            return Err(Error::InvalidArgument(format!(
                "landmark {l} outside 0..{}",
                self.landmarks
            )));
        }
        if self.images.is_empty() {
            return Err(Error::InvalidArgument("no images in error matrix".into()));
        }
        Ok((0..self.rows())
            .flat_map(|i| subset.iter().map(move |&l| (i, l)))
            .map(|(i, l)| self.errors[i * self.landmarks + l])
            .collect())
    }

    /// Number of subset cells within `r` (inclusive) and the number of cells.
    pub fn pck_count(&self, r: f64, subset: &[usize]) -> Result<(usize, usize)> {
        let v = self.subset_values(subset)?;
        Ok((v.iter().filter(|&&e| e <= r).count(), v.len()))
    }

    pub fn pck(&self, r: f64, subset: &[usize]) -> Result<f64> {
        let (hits, n) = self.pck_count(r, subset)?;
        Ok(percent(hits, n))
    }

    /// Number of cells above [`OUTLIER_MM`] over all landmarks, and the cell count.
    pub fn outlier_count(&self) -> Result<(usize, usize)> {
        let all: Vec<usize> = (0..self.landmarks).collect();
        let v = self.subset_values(&all)?;
        Ok((v.iter().filter(|&&e| e > OUTLIER_MM).count(), v.len()))
    }

    pub fn outlier_rate(&self) -> Result<f64> {
        let (k, n) = self.outlier_count()?;
        Ok(percent(k, n))
    }

    /// Recall at every distinct error value and on the grid `0, 0.1, ..., 10` mm,
    /// sorted by threshold.
    pub fn cumulative_distribution(&self, subset: &[usize]) -> Result<Vec<(f64, f64)>> {
        let mut v = self.subset_values(subset)?;
        v.sort_by(f64::total_cmp);
        let mut thresholds: Vec<f64> = (0..=100).map(|k| k as f64 / 10.0).collect();
        thresholds.extend_from_slice(&v);
        thresholds.sort_by(f64::total_cmp);
        thresholds.dedup();
        Ok(thresholds
            .into_iter()
            .map(|t| (t, percent(v.partition_point(|&e| e <= t), v.len())))
            .collect())
    }

    pub fn evaluate(&self, subset: &Subset) -> Result<FoldMetrics> {
        let ids = subset.ids(self.landmarks);
        let pck = PCK_RADII_MM
            .iter()
            .map(|&r| Ok((r, self.pck(r, &ids)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(FoldMetrics {
            pck,
            outliers: self.outlier_rate()?,
            images: self.rows(),
        })
    }
}

pub fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * count as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    /// `(radius mm, PCK %)` for each radius in [`PCK_RADII_MM`].
    pub pck: Vec<(f64, f64)>,
    pub outliers: f64,
    pub images: usize,
}

impl FoldMetrics {
    pub fn mean_pck(&self) -> f64 {
        self.pck.iter().map(|p| p.1).sum::<f64>() / self.pck.len().max(1) as f64
    }
}

/// Mean and population standard deviation over folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Absent for a single fold.
    pub std: Option<f64>,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.std {
            Some(s) => write!(f, "{:.2} ± {:.2}", self.mean, s),
            None => write!(f, "{:.2}", self.mean),
        }
    }
}

pub fn aggregate_folds(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("no folds to aggregate".into()));
    }
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / k).sqrt());
    Ok(Summary { mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub dataset: String,
    pub subset: String,
    pub folds: Vec<FoldMetrics>,
    /// `(radius mm, summary)` per radius.
    pub pck: Vec<(f64, Summary)>,
    pub outliers: Summary,
}

impl EvaluationReport {
    pub fn from_folds(dataset: &str, subset: &Subset, folds: Vec<FoldMetrics>) -> Result<Self> {
        let first = folds
            .first()
            .ok_or_else(|| Error::InvalidArgument("no folds to report".into()))?;
        let pck = first
            .pck
            .iter()
            .enumerate()
            .map(|(k, &(r, _))| {
                let vals: Vec<f64> = folds.iter().map(|f| f.pck[k].1).collect();
                Ok((r, aggregate_folds(&vals)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let outliers = aggregate_folds(&folds.iter().map(|f| f.outliers).collect::<Vec<_>>())?;
        Ok(Self {
            dataset: dataset.to_string(),
            subset: subset.name(),
            folds,
            pck,
            outliers,
        })
    }

    /// Flat rows `dataset,fold,metric,r,subset,value`; `fold` is the fold
    /// index, `mean` or `std`.
    pub fn csv_rows(&self) -> Vec<[String; 6]> {
        let mut rows = Vec::new();
        let mut push = |fold: String, metric: &str, r: Option<f64>, value: f64| {
            rows.push([
                self.dataset.clone(),
                fold,
                metric.to_string(),
                r.map(|r| r.to_string()).unwrap_or_default(),
                self.subset.clone(),
                value.to_string(),
            ]);
        };
        for (i, f) in self.folds.iter().enumerate() {
            for &(r, v) in &f.pck {
                push(i.to_string(), "pck", Some(r), v);
            }
            push(i.to_string(), "outliers", Some(OUTLIER_MM), f.outliers);
        }
        for &(r, s) in &self.pck {
            push("mean".into(), "pck", Some(r), s.mean);
            if let Some(std) = s.std {
                push("std".into(), "pck", Some(r), std);
            }
        }
        push(
            "mean".into(),
            "outliers",
            Some(OUTLIER_MM),
            self.outliers.mean,
        );
        if let Some(std) = self.outliers.std {
            push("std".into(), "outliers", Some(OUTLIER_MM), std);
        }
        rows
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        w.write_record(["dataset", "fold", "metric", "r", "subset", "value"])
            .map_err(|e| csv_error(path, e))?;
        for row in self.csv_rows() {
            w.write_record(&row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidArgument(format!("serialising report: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Human-readable table in the `mean ± std` layout.
    pub fn summary_table(&self) -> String {
        let mut out = format!("{} ({} landmarks subset)\n", self.dataset, self.subset);
        for (r, s) in &self.pck {
            out.push_str(&format!("  {:<12}{s}\n", format!("PCK@{r} mm")));
        }
        out.push_str(&format!("  {:<12}{}\n", "outliers", self.outliers));
        out
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub fn write_cdf_csv(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut text = String::from("threshold_mm,recall_pct\n");
    for (t, r) in points {
        text.push_str(&format!("{t},{r}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
