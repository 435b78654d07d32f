//! Region-level explanations of a trained classifier.
//!
//! Two views: Kernel SHAP attributions of the positive-class probability to
//! a subject's node features, and attention mass that each region sends
//! along its edges, summed over blocks and graphs.

pub mod shap;

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::connectome::BrainGraph;
use crate::error::{Error, Result};
use crate::nn::{Classifier, GraphBatch};

pub use shap::{
    background_mean, kernel_shap, kernel_shap_batched, kernel_shap_grouped, kernel_weight, shapley_by_enumeration,
    singleton_groups, ShapValues, DEFAULT_SAMPLES, EXACT_LIMIT,
};

/// Graphs per forward pass when scoring perturbed subjects.
const GRAPH_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapLevel {
    /// Every node feature is a player.
    #[default]
    Feature,
    /// Each region's whole feature row is one player.
    Region,
}

impl std::str::FromStr for ShapLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "feature" => Ok(ShapLevel::Feature),
            "region" => Ok(ShapLevel::Region),
            other => Err(Error::Config(format!("unknown SHAP level {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapOptions {
    pub n_samples: usize,
    pub seed: u64,
    pub level: ShapLevel,
}

impl Default for ShapOptions {
    fn default() -> Self {
        Self { n_samples: DEFAULT_SAMPLES, seed: 0, level: ShapLevel::Feature }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapReport {
    pub subject: String,
    pub n_regions: usize,
    pub feature_dim: usize,
    /// Row-major `n × d` attributions. At region level a region's value is
    /// spread evenly over its row.
    pub values: Vec<f64>,
    /// Mean attribution over each region's row.
    pub region_scores: Vec<f64>,
    /// `(region, score)` by descending score.
    pub ranking: Vec<(String, f64)>,
    pub base_value: f64,
    pub prediction: f64,
    pub exact: bool,
}

/// Positive-class probability for each feature matrix, laid over `graph`'s
/// edges.
pub fn positive_probability(model: &Classifier, graph: &BrainGraph, inputs: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (n, d) = (graph.n_nodes(), graph.feature_dim());
    let chunks: Vec<&[Vec<f64>]> = inputs.chunks(GRAPH_CHUNK).collect();
    let scored: Vec<Vec<f64>> = chunks
        .par_iter()
        .map(|chunk| {
            let graphs = chunk
                .iter()
                .map(|flat| {
                    let features = Array2::from_shape_vec((n, d), flat.clone())
                        .map_err(|_| Error::Data(format!("flat input of length {} is not {n}×{d}", flat.len())))?;
                    Ok(BrainGraph { features, ..graph.clone() })
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&BrainGraph> = graphs.iter().collect();
            Ok(model.predict(&GraphBatch::new(&refs)?)?.positive_scores())
        })
        .collect::<Result<_>>()?;
    Ok(scored.concat())
}

fn flat(g: &BrainGraph) -> Vec<f64> {
    g.features.iter().copied().collect()
}

fn rank(names: &[String], scores: &[f64]) -> Vec<(String, f64)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.into_iter().map(|i| (names[i].clone(), scores[i])).collect()
}

/// Kernel SHAP for one subject against the mean of `background`.
pub fn subject_shap(
    model: &Classifier,
    graph: &BrainGraph,
    background: &[&BrainGraph],
    opts: &ShapOptions,
) -> Result<ShapReport> {
    let (n, d) = (graph.n_nodes(), graph.feature_dim());
    if d != model.arch.input_dim {
        return Err(Error::Data(format!("subject {} has feature width {d}, model expects {}", graph.id, model.arch.input_dim)));
    }
    if let Some(b) = background.iter().find(|b| b.features.dim() != (n, d)) {
        return Err(Error::Data(format!("background subject {} is not {n}×{d}", b.id)));
    }
    let reference = background_mean(&background.iter().map(|b| flat(b)).collect::<Vec<_>>())?;
    let groups = match opts.level {
        ShapLevel::Feature => singleton_groups(n * d),
        ShapLevel::Region => (0..n).map(|r| (r * d..(r + 1) * d).collect()).collect(),
    };
    let f = |rows: &[Vec<f64>]| positive_probability(model, graph, rows);
    let s = kernel_shap_batched(&f, &reference, &flat(graph), &groups, opts.n_samples, opts.seed)?;
    let values = match opts.level {
        ShapLevel::Feature => s.phi,
        ShapLevel::Region => s.phi.iter().flat_map(|&p| std::iter::repeat_n(p / d as f64, d)).collect(),
    };
    let region_scores: Vec<f64> = values.chunks(d).map(|row| row.iter().sum::<f64>() / d as f64).collect();
    Ok(ShapReport {
        subject: graph.id.clone(),
        n_regions: n,
        feature_dim: d,
        ranking: rank(&graph.region_names, &region_scores),
        values,
        region_scores,
        base_value: s.base_value,
        prediction: s.prediction,
        exact: s.exact,
    })
}

/// Cohort ranking by mean absolute region score across subjects.
pub fn cohort_shap_ranking(reports: &[ShapReport], region_names: &[String]) -> Result<Vec<(String, f64)>> {
    let first = reports.first().ok_or_else(|| Error::Data("no SHAP reports to aggregate".into()))?;
    let n = first.n_regions;
    if region_names.len() != n || reports.iter().any(|r| r.n_regions != n) {
        return Err(Error::Data("SHAP reports disagree on the number of regions".into()));
    }
    let mut mean = vec![0.0; n];
    for r in reports {
        for (m, s) in mean.iter_mut().zip(&r.region_scores) {
            *m += s.abs() / reports.len() as f64;
        }
    }
    Ok(rank(region_names, &mean))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionImportance {
    pub region: String,
    /// Attention this region sends, summed over blocks, graphs and edges.
    pub score: f64,
    /// The same sum restricted to each block.
    pub per_layer: Vec<f64>,
}

/// Attention importance over `graphs`.
///
/// Region `j` collects the head-averaged coefficient of every edge along
/// which it is the message source (its self-loop included). Each
/// destination's incoming coefficients sum to 1, so one block on one graph
/// distributes exactly `n` units among the regions.
pub fn attention_importance(model: &Classifier, graphs: &[BrainGraph]) -> Result<Vec<RegionImportance>> {
    let first = graphs.first().ok_or_else(|| Error::Data("attention importance needs at least one graph".into()))?;
    let n = first.n_nodes();
    if let Some(g) = graphs.iter().find(|g| g.n_nodes() != n) {
        return Err(Error::Data(format!("graph {} has {} regions, expected {n}", g.id, g.n_nodes())));
    }
    let layers = model.arch.n_blocks;
    let partial: Vec<Vec<Vec<f64>>> = graphs
        .par_chunks(GRAPH_CHUNK)
        .map(|chunk| {
            let refs: Vec<&BrainGraph> = chunk.iter().collect();
            let mut acc = vec![vec![0.0; layers]; n];
            for rec in model.attention(&GraphBatch::new(&refs)?)? {
                for (&(src, _), &a) in rec.edges.iter().zip(&rec.alpha) {
                    acc[src][rec.layer_index] += a;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut per_region = vec![vec![0.0; layers]; n];
    for acc in partial {
        for (total, part) in per_region.iter_mut().zip(acc) {
            total.iter_mut().zip(part).for_each(|(t, p)| *t += p);
        }
    }
    let mut out: Vec<RegionImportance> = per_region
        .into_iter()
        .enumerate()
        .map(|(r, per_layer)| RegionImportance {
            region: first.region_names[r].clone(),
            score: per_layer.iter().sum(),
            per_layer,
        })
        .collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub shap: Vec<(String, f64)>,
    pub attention: Vec<(String, f64)>,
    /// Regions present in both top-k lists.
    pub overlap: usize,
}

pub fn export_rankings(shap: &[(String, f64)], attention: &[RegionImportance], k: usize) -> Result<RankingTable> {
    if k > shap.len() || k > attention.len() {
        return Err(Error::Config(format!("top-k {k} exceeds the {} ranked regions", shap.len().min(attention.len()))));
    }
    let shap: Vec<(String, f64)> = shap[..k].to_vec();
    let attention: Vec<(String, f64)> = attention[..k].iter().map(|r| (r.region.clone(), r.score)).collect();
    let overlap = shap.iter().filter(|(s, _)| attention.iter().any(|(a, _)| a == s)).count();
    Ok(RankingTable { shap, attention, overlap })
}

fn superscript(n: i32) -> String {
    const DIGITS: [char; 10] = ['⁰', '¹', '²', '³', '⁴', '⁵', '⁶', '⁷', '⁸', '⁹'];
    let mut s = String::new();
    if n < 0 {
        s.push('⁻');
    }
    for c in n.unsigned_abs().to_string().chars() {
        s.push(DIGITS[c.to_digit(10).unwrap() as usize]);
    }
    s
}

/// Four significant figures; scientific with a superscript exponent when
/// the magnitude is below 0.01, e.g. `3.294×10⁻⁴`.
pub fn format_score(v: f64) -> String {
    if v == 0.0 || !v.is_finite() || v.abs() >= 0.01 {
        return format!("{v:.3}");
    }
    let mut exp = v.abs().log10().floor() as i32;
    let mut mantissa = v / 10f64.powi(exp);
    if format!("{:.3}", mantissa.abs()) == "10.000" {
        exp += 1;
        mantissa /= 10.0;
    }
    format!("{mantissa:.3}×10{}", superscript(exp))
}

impl RankingTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Rank | Shapley (with Score) | Attention (with Score) |\n|---|---|---|\n");
        for (i, ((sn, sv), (an, av))) in self.shap.iter().zip(&self.attention).enumerate() {
            let _ = writeln!(s, "| {} | {sn} ({}) | {an} ({}) |", i + 1, format_score(*sv), format_score(*av));
        }
        let _ = writeln!(s, "\nRegions in both lists: {} of {}", self.overlap, self.shap.len());
        s
    }
}

pub fn write_region_csv(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["region", "score"]).map_err(io)?;
    for (region, score) in rows {
        w.write_record([region.as_str(), &score.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
