//! Synthetic cohorts with a planted class difference.
//!
//! Class-1 subjects carry a per-subject latent AR(1) signal mixed into the
//! planted regions; class-0 subjects are independent noise everywhere. The
//! planted regions are therefore more strongly correlated with each other
//! in class 1 than in class 0.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    default_region_names, save_manifest, write_time_series, CohortManifest, Label, SubjectEntry,
    TimeSeriesMatrix,
};
use crate::error::{Error, Result};
use crate::seeds;

/// Lag-1 autocorrelation of the latent signal.
const LATENT_AR: f64 = 0.5;
const SUBJECT_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCohortSpec {
    pub n_subjects_per_class: usize,
    pub n_regions: usize,
    pub n_timepoints: usize,
    pub planted_block: Vec<usize>,
    pub coupling_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticCohortSpec {
    fn default() -> Self {
        Self {
            n_subjects_per_class: 50,
            n_regions: 20,
            n_timepoints: 200,
            planted_block: (0..5).collect(),
            coupling_strength: 0.8,
            noise_sigma: 1.0,
            seed: 0,
        }
    }
}

impl SyntheticCohortSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_subjects_per_class == 0 {
            return bad("n_subjects_per_class must be positive".into());
        }
        if self.n_regions < 2 {
            return bad(format!("n_regions must be >= 2, got {}", self.n_regions));
        }
        if self.n_timepoints < 2 {
            return bad(format!("n_timepoints must be >= 2, got {}", self.n_timepoints));
        }
        if let Some(i) = self.planted_block.iter().find(|&&i| i >= self.n_regions) {
            return bad(format!("planted region {i} >= n_regions {}", self.n_regions));
        }
        // coupling 0 is accepted: it is the null-signal cohort
        if !(0.0..1.0).contains(&self.coupling_strength) {
            return bad(format!("coupling_strength must lie in [0, 1), got {}", self.coupling_strength));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be positive, got {}", self.noise_sigma));
        }
        Ok(())
    }
}

fn subject_series(spec: &SyntheticCohortSpec, index: usize, label: Label) -> TimeSeriesMatrix {
    let mut rng = seeds::stream(spec.seed, SUBJECT_STREAM_BASE + index as u64);
    let (t, r) = (spec.n_timepoints, spec.n_regions);
    let innovation = (1.0 - LATENT_AR * LATENT_AR).sqrt();
    let mut latent = Vec::with_capacity(t);
    let mut prev: f64 = rng.sample(StandardNormal);
    for _ in 0..t {
        latent.push(prev);
        let eta: f64 = rng.sample(StandardNormal);
        prev = LATENT_AR * prev + innovation * eta;
    }
    let mut in_block = vec![false; r];
    for &b in &spec.planted_block {
        in_block[b] = true;
    }
    let mut values = Array2::zeros((t, r));
    for ti in 0..t {
        for ri in 0..r {
            let noise: f64 = rng.sample(StandardNormal);
            let mut v = spec.noise_sigma * noise;
            if label == Label::Asd && in_block[ri] {
                v += spec.coupling_strength * latent[ti];
            }
            values[[ti, ri]] = v;
        }
    }
    TimeSeriesMatrix(values)
}

/// Deterministic in `spec`. Subjects alternate control/ASD so both classes
/// are interleaved in manifest order.
pub fn generate_synthetic_cohort(
    spec: &SyntheticCohortSpec,
) -> Result<(CohortManifest, Vec<TimeSeriesMatrix>)> {
    spec.validate()?;
    let n = 2 * spec.n_subjects_per_class;
    let width = (n - 1).to_string().len().max(4);
    let mut subjects = Vec::with_capacity(n);
    let mut series = Vec::with_capacity(n);
    for i in 0..n {
        let label = if i % 2 == 0 { Label::Control } else { Label::Asd };
        let id = format!("sub-{i:0width$}");
        series.push(subject_series(spec, i, label));
        subjects.push(SubjectEntry { path: format!("{id}.csv"), id, label });
    }
    let manifest = CohortManifest {
        n_regions: spec.n_regions,
        subjects,
        region_names: Some(default_region_names(spec.n_regions)),
        base_dir: Default::default(),
    };
    Ok((manifest, series))
}

/// Writes `manifest.json` plus one CSV per subject into `dir`.
pub fn write_synthetic_cohort(spec: &SyntheticCohortSpec, dir: &Path) -> Result<CohortManifest> {
    let (mut manifest, series) = generate_synthetic_cohort(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (s, ts) in manifest.subjects.iter().zip(&series) {
        write_time_series(ts, dir.join(&s.path))?;
    }
    save_manifest(&manifest, dir.join("manifest.json"))?;
    manifest.base_dir = dir.to_path_buf();
    Ok(manifest)
}
