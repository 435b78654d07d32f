//! Cohort manifests, ROI time-series files and preprocessing.

mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synthetic::{generate_synthetic_cohort, write_synthetic_cohort, SyntheticCohortSpec};

/// Diagnostic label. Positive class is ASD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "u8")]
pub enum Label {
    Control = 0,
    Asd = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::Control),
            1 => Some(Label::Asd),
            _ => None,
        }
    }
}

impl TryFrom<i64> for Label {
    type Error = String;

    fn try_from(v: i64) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Control),
            1 => Ok(Label::Asd),
            other => Err(format!("unknown label value {other}")),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub id: String,
    pub label: Label,
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub n_regions: usize,
    pub subjects: Vec<SubjectEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_names: Option<Vec<String>>,
    /// Directory that relative subject paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl CohortManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_regions < 2 {
            return Err(Error::Data(format!("n_regions must be >= 2, got {}", self.n_regions)));
        }
        let mut seen = HashSet::new();
        for s in &self.subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Data(format!("duplicate subject id {:?}", s.id)));
            }
        }
        if let Some(names) = &self.region_names {
            if names.len() != self.n_regions {
                return Err(Error::Data(format!(
                    "n_regions mismatch: {} region names for n_regions {}",
                    names.len(),
                    self.n_regions
                )));
            }
        }
        Ok(())
    }

    pub fn label_counts(&self) -> BTreeMap<Label, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.subjects {
            *counts.entry(s.label).or_insert(0) += 1;
        }
        counts
    }

    pub fn region_names(&self) -> Vec<String> {
        self.region_names
            .clone()
            .unwrap_or_else(|| default_region_names(self.n_regions))
    }

    pub fn resolve(&self, subject: &SubjectEntry) -> PathBuf {
        let p = Path::new(&subject.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }
}

pub fn default_region_names(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len();
    (0..n).map(|i| format!("ROI {i:0width$}")).collect()
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CohortManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: CohortManifest = serde_json::from_str(&text).map_err(|e| {
        let msg = e.to_string();
        Error::Data(format!("invalid manifest {}: {msg}", path.display()))
    })?;
    manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    manifest.validate()?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &CohortManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest).expect("manifest serialises");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `T × R` ROI signals; rows are time points. Missing samples are NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesMatrix(pub Array2<f64>);

impl TimeSeriesMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (t, r) = values.dim();
        if t < 2 {
            return Err(Error::Data(format!("time series needs at least 2 time points, got {t}")));
        }
        if r == 0 {
            return Err(Error::Data("time series has no regions".into()));
        }
        Ok(Self(values))
    }

    pub fn n_timepoints(&self) -> usize {
        self.0.nrows()
    }

    pub fn n_regions(&self) -> usize {
        self.0.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn has_missing(&self) -> bool {
        self.0.iter().any(|v| v.is_nan())
    }
}

/// Read a headerless CSV of `T` rows with `n_regions` fields each.
/// `nan` in any letter case marks a missing sample.
pub fn load_time_series(path: impl AsRef<Path>, n_regions: usize) -> Result<TimeSeriesMatrix> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if record.len() != n_regions {
            return Err(Error::Data(format!(
                "{}: n_regions mismatch on row {}: {} fields, expected {n_regions}",
                path.display(),
                line + 1,
                record.len()
            )));
        }
        for field in record.iter() {
            data.push(parse_sample(field).ok_or_else(|| {
                Error::Data(format!("{}: row {}: bad value {field:?}", path.display(), line + 1))
            })?);
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, n_regions), data)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    TimeSeriesMatrix::new(values)
}

fn parse_sample(field: &str) -> Option<f64> {
    if field.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    field.parse::<f64>().ok().filter(|v| v.is_finite())
}

pub fn write_time_series(ts: &TimeSeriesMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for row in ts.0.rows() {
        let line: Vec<String> = row
            .iter()
            .map(|v| if v.is_nan() { "nan".to_string() } else { v.to_string() })
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Replace every missing sample with 0.
pub fn impute_missing(ts: &TimeSeriesMatrix) -> TimeSeriesMatrix {
    TimeSeriesMatrix(ts.0.mapv(|v| if v.is_nan() { 0.0 } else { v }))
}

/// Per-column z-score with the population (divide-by-T) standard deviation.
/// Constant columns become all zeros.
pub fn zscore_normalize(ts: &TimeSeriesMatrix) -> TimeSeriesMatrix {
    let t = ts.n_timepoints() as f64;
    let mut out = ts.0.clone();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo == hi {
            col.fill(0.0);
            continue;
        }
        let mean = col.sum() / t;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t;
        let sd = var.sqrt();
        col.mapv_inplace(|v| (v - mean) / sd);
    }
    TimeSeriesMatrix(out)
}

/// Imputation followed by z-scoring.
pub fn preprocess(ts: &TimeSeriesMatrix) -> TimeSeriesMatrix {
    zscore_normalize(&impute_missing(ts))
}
