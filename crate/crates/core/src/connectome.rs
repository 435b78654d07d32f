//! Pearson functional connectivity and thresholded brain graphs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{self, CohortManifest, Label, TimeSeriesMatrix};

pub const DEFAULT_THRESHOLD: f64 = 0.2;

/// `R × R` Pearson correlations. Constant regions correlate 0 with
/// everything, themselves included.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMatrix(pub Array2<f64>);

impl ConnectivityMatrix {
    pub fn n_regions(&self) -> usize {
        self.0.nrows()
    }
}

pub fn pearson_matrix(ts: &TimeSeriesMatrix) -> Result<ConnectivityMatrix> {
    let (t, r) = ts.0.dim();
    if t < 2 {
        return Err(Error::Data(format!("pearson needs at least 2 time points, got {t}")));
    }
    let mut centered = ts.0.clone();
    let mut norms = vec![0.0; r];
    let mut constant = vec![false; r];
    for (j, mut col) in centered.columns_mut().into_iter().enumerate() {
        let (lo, hi) = col
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        constant[j] = lo == hi;
        let mean = col.sum() / t as f64;
        col.mapv_inplace(|v| v - mean);
        norms[j] = col.dot(&col).sqrt();
    }
    let mut out = Array2::zeros((r, r));
    for i in 0..r {
        if constant[i] {
            continue;
        }
        out[[i, i]] = 1.0;
        for j in i + 1..r {
            if constant[j] {
                continue;
            }
            let cov = centered.column(i).dot(&centered.column(j));
            let v = (cov / (norms[i] * norms[j])).clamp(-1.0, 1.0);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    Ok(ConnectivityMatrix(out))
}

/// How node features are derived from a subject's data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FeatureMode {
    /// Row `i` of the connectivity matrix.
    #[default]
    CorrelationProfile,
    /// Connectivity row followed by the first `k` z-scored samples of region `i`.
    CorrelationPlusSeries(usize),
}

impl FeatureMode {
    pub fn width(self, n_regions: usize) -> usize {
        match self {
            FeatureMode::CorrelationProfile => n_regions,
            FeatureMode::CorrelationPlusSeries(k) => n_regions + k,
        }
    }
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureMode::CorrelationProfile => write!(f, "correlation-profile"),
            FeatureMode::CorrelationPlusSeries(k) => write!(f, "correlation-plus-series:{k}"),
        }
    }
}

impl FromStr for FeatureMode {
    type Err = Error;

    /// Accepts `correlation-profile`, `correlation-plus-series:K` and
    /// `correlation-plus-series(K)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "correlation-profile" {
            return Ok(FeatureMode::CorrelationProfile);
        }
        let rest = s
            .strip_prefix("correlation-plus-series")
            .ok_or_else(|| Error::Config(format!("invalid feature mode {s:?}")))?;
        let k = rest
            .strip_prefix(':')
            .or_else(|| rest.strip_prefix('(').and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| Error::Config(format!("invalid feature mode {s:?}")))?;
        let k: i64 = k
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("invalid series length in {s:?}")))?;
        if k < 0 {
            return Err(Error::Config(format!("series length must be >= 0, got {k}")));
        }
        Ok(FeatureMode::CorrelationPlusSeries(k as usize))
    }
}

impl Serialize for FeatureMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FeatureMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn node_features(
    conn: &ConnectivityMatrix,
    ts: &TimeSeriesMatrix,
    mode: FeatureMode,
) -> Result<Array2<f64>> {
    let n = conn.n_regions();
    match mode {
        FeatureMode::CorrelationProfile | FeatureMode::CorrelationPlusSeries(0) => Ok(conn.0.clone()),
        FeatureMode::CorrelationPlusSeries(k) => {
            if ts.n_regions() != n {
                return Err(Error::Data(format!(
                    "time series has {} regions, connectivity has {n}",
                    ts.n_regions()
                )));
            }
            let mut x = Array2::zeros((n, n + k));
            x.slice_mut(s![.., ..n]).assign(&conn.0);
            let take = k.min(ts.n_timepoints());
            for i in 0..n {
                for t in 0..take {
                    x[[i, n + t]] = ts.0[[t, i]];
                }
            }
            Ok(x)
        }
    }
}

/// Undirected edge with its Pearson weight; `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// One subject's graph `G = (V, E, A)` with node features `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct BrainGraph {
    pub id: String,
    pub label: Label,
    pub region_names: Vec<String>,
    pub edges: Vec<Edge>,
    pub features: Array2<f64>,
}

impl BrainGraph {
    pub fn n_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Binary symmetric adjacency with zero diagonal.
    pub fn adjacency(&self) -> Array2<u8> {
        let n = self.n_nodes();
        let mut a = Array2::zeros((n, n));
        for e in &self.edges {
            a[[e.i, e.j]] = 1;
            a[[e.j, e.i]] = 1;
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_nodes();
        if n == 0 {
            return Err(Error::Data(format!("graph {} has no nodes", self.id)));
        }
        if self.region_names.len() != n {
            return Err(Error::Data(format!(
                "graph {}: {} region names for {n} nodes",
                self.id,
                self.region_names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.edges {
            if e.i == e.j || e.i >= n || e.j >= n || !e.weight.is_finite() {
                return Err(Error::Data(format!("graph {}: invalid edge {e:?}", self.id)));
            }
            if !seen.insert((e.i.min(e.j), e.i.max(e.j))) {
                return Err(Error::Data(format!("graph {}: duplicate edge {e:?}", self.id)));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("graph {}: non-finite feature", self.id)));
        }
        Ok(())
    }

    /// Relabel nodes: new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> BrainGraph {
        let n = self.n_nodes();
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let features = Array2::from_shape_fn(self.features.dim(), |(r, c)| self.features[[perm[r], c]]);
        let edges = self
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (inverse[e.i], inverse[e.j]);
                Edge { i: a.min(b), j: a.max(b), weight: e.weight }
            })
            .collect();
        let region_names = perm.iter().map(|&p| self.region_names[p].clone()).collect();
        BrainGraph { id: self.id.clone(), label: self.label, region_names, edges, features }
    }
}

/// Keep every off-diagonal pair with `|r| >= threshold`.
pub fn build_graph(
    id: impl Into<String>,
    conn: &ConnectivityMatrix,
    threshold: f64,
    features: Array2<f64>,
    label: Label,
    region_names: Vec<String>,
) -> Result<BrainGraph> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold must lie in [0, 1], got {threshold}")));
    }
    let n = conn.n_regions();
    if conn.0.ncols() != n || features.nrows() != n || region_names.len() != n {
        return Err(Error::Data(format!(
            "dimension mismatch: connectivity {:?}, features {:?}, {} region names",
            conn.0.dim(),
            features.dim(),
            region_names.len()
        )));
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let w = conn.0[[i, j]];
            if w.abs() >= threshold {
                edges.push(Edge { i, j, weight: w });
            }
        }
    }
    Ok(BrainGraph { id: id.into(), label, region_names, edges, features })
}

/// Preprocess one subject's raw series and build its graph.
pub fn subject_graph(
    id: &str,
    label: Label,
    raw: &TimeSeriesMatrix,
    threshold: f64,
    mode: FeatureMode,
    region_names: Vec<String>,
) -> Result<BrainGraph> {
    let ts = ingest::preprocess(raw);
    let conn = pearson_matrix(&ts)?;
    let x = node_features(&conn, &ts, mode)?;
    build_graph(id, &conn, threshold, x, label, region_names)
}

pub fn graphs_from_series(
    manifest: &CohortManifest,
    series: &[TimeSeriesMatrix],
    threshold: f64,
    mode: FeatureMode,
) -> Result<Vec<BrainGraph>> {
    let names = manifest.region_names();
    manifest
        .subjects
        .iter()
        .zip(series)
        .map(|(s, ts)| subject_graph(&s.id, s.label, ts, threshold, mode, names.clone()))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    id: String,
    label: Label,
    n_nodes: usize,
    region_names: Vec<String>,
    edges: Vec<(usize, usize, f64)>,
    features: Vec<Vec<f64>>,
}

pub fn graph_to_json(g: &BrainGraph) -> String {
    let file = GraphFile {
        id: g.id.clone(),
        label: g.label,
        n_nodes: g.n_nodes(),
        region_names: g.region_names.clone(),
        edges: g.edges.iter().map(|e| (e.i, e.j, e.weight)).collect(),
        features: g.features.rows().into_iter().map(|r| r.to_vec()).collect(),
    };
    serde_json::to_string(&file).expect("graph serialises")
}

pub fn graph_from_json(text: &str) -> Result<BrainGraph> {
    let f: GraphFile =
        serde_json::from_str(text).map_err(|e| Error::Data(format!("invalid graph file: {e}")))?;
    let d = f.features.first().map_or(0, Vec::len);
    if f.features.len() != f.n_nodes || f.features.iter().any(|r| r.len() != d) {
        return Err(Error::Data(format!("graph {}: feature matrix is not {}×d", f.id, f.n_nodes)));
    }
    let features = Array2::from_shape_vec((f.n_nodes, d), f.features.concat())
        .map_err(|e| Error::Data(e.to_string()))?;
    let g = BrainGraph {
        id: f.id,
        label: f.label,
        region_names: f.region_names,
        edges: f.edges.into_iter().map(|(i, j, weight)| Edge { i, j, weight }).collect(),
        features,
    };
    g.validate()?;
    Ok(g)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphIndexEntry {
    pub id: String,
    pub label: Label,
    pub path: String,
}

/// Cohort index written next to the per-subject graph files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphIndex {
    pub threshold: f64,
    pub feature_mode: FeatureMode,
    pub n_regions: usize,
    pub feature_dim: usize,
    pub graphs: Vec<GraphIndexEntry>,
}

pub const INDEX_FILE: &str = "index.json";

pub fn write_graph_dir(graphs: &[BrainGraph], threshold: f64, mode: FeatureMode, dir: &Path) -> Result<GraphIndex> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::Data("no graphs to write".into()))?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(graphs.len());
    for g in graphs {
        if g.feature_dim() != first.feature_dim() {
            return Err(Error::Data(format!(
                "graph {} has feature width {}, cohort uses {}",
                g.id,
                g.feature_dim(),
                first.feature_dim()
            )));
        }
        let name = format!("{}.json", g.id);
        let path = dir.join(&name);
        fs::write(&path, graph_to_json(g)).map_err(|e| Error::io(&path, e))?;
        entries.push(GraphIndexEntry { id: g.id.clone(), label: g.label, path: name });
    }
    let index = GraphIndex {
        threshold,
        feature_mode: mode,
        n_regions: first.n_nodes(),
        feature_dim: first.feature_dim(),
        graphs: entries,
    };
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).expect("index serialises");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

/// Load every graph listed in `<dir>/index.json` (or an explicit index path).
pub fn load_graph_dir(path: &Path) -> Result<(GraphIndex, Vec<BrainGraph>)> {
    let index_path: PathBuf = if path.is_dir() { path.join(INDEX_FILE) } else { path.to_path_buf() };
    let base = index_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: GraphIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Data(format!("invalid graph index {}: {e}", index_path.display())))?;
    let mut graphs = Vec::with_capacity(index.graphs.len());
    for entry in &index.graphs {
        let p = base.join(&entry.path);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let g = graph_from_json(&text)?;
        if g.feature_dim() != index.feature_dim {
            return Err(Error::Data(format!("graph {} feature width mismatch", g.id)));
        }
        graphs.push(g);
    }
    Ok((index, graphs))
}

/// Read every subject in a manifest and build its graph.
pub fn build_cohort_graphs(manifest: &CohortManifest, threshold: f64, mode: FeatureMode) -> Result<Vec<BrainGraph>> {
    let names = manifest.region_names();
    manifest
        .subjects
        .iter()
        .map(|s| {
            let raw = ingest::load_time_series(manifest.resolve(s), manifest.n_regions)?;
            subject_graph(&s.id, s.label, &raw, threshold, mode, names.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    use super::*;

    fn ts(a: Array2<f64>) -> TimeSeriesMatrix {
        TimeSeriesMatrix(a)
    }

    fn names(n: usize) -> Vec<String> {
        ingest::default_region_names(n)
    }

    /// Textbook two-pass Pearson.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn perfect_and_hand_computed_correlations() {
        let c = pearson_matrix(&ts(array![[1., 1., 4., -1.], [2., 3., 3., -2.], [3., 2., 2., -3.], [4., 4., 1., -4.]]))
            .unwrap();
        assert_abs_diff_eq!(c.0[[0, 1]], 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(c.0[[0, 2]], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.0[[1, 2]], -0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(c.0[[0, 3]], -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.0[[0, 1]], pearson_oracle(&[1., 2., 3., 4.], &[1., 3., 2., 4.]), epsilon = 1e-12);
        for i in 0..4 {
            assert_eq!(c.0[[i, i]], 1.0);
        }
        let same = pearson_matrix(&ts(array![[1., 1.], [5., 5.], [2., 2.]])).unwrap();
        assert_abs_diff_eq!(same.0[[0, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_column_correlates_zero() {
        let c = pearson_matrix(&ts(array![[1., 7.], [2., 7.], [4., 7.]])).unwrap();
        assert_eq!(c.0[[1, 1]], 0.0);
        assert_eq!(c.0[[0, 1]], 0.0);
        assert_eq!(c.0[[0, 0]], 1.0);
        assert!(pearson_matrix(&ts(array![[1., 2.]])).is_err());
    }

    #[test]
    fn threshold_examples() {
        let id = ConnectivityMatrix(Array2::eye(4));
        let g = build_graph("s", &id, 0.2, Array2::zeros((4, 2)), Label::Asd, names(4)).unwrap();
        assert!(g.edges.is_empty());
        let g = build_graph("s", &id, 0.0, Array2::zeros((4, 2)), Label::Asd, names(4)).unwrap();
        assert_eq!(g.edges.len(), 6);

        let c = ConnectivityMatrix(array![[1.0, 0.5, -0.3], [0.5, 1.0, 0.1], [-0.3, 0.1, 1.0]]);
        let g = build_graph("s", &c, 0.2, Array2::zeros((3, 1)), Label::Control, names(3)).unwrap();
        assert_eq!(
            g.edges,
            vec![Edge { i: 0, j: 1, weight: 0.5 }, Edge { i: 0, j: 2, weight: -0.3 }]
        );
        let a = g.adjacency();
        assert_eq!(a, a.t());
        assert!((0..3).all(|i| a[[i, i]] == 0));

        // inclusive comparison
        let g = build_graph("s", &c, 0.5, Array2::zeros((3, 1)), Label::Control, names(3)).unwrap();
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn build_graph_rejects_dimension_mismatch() {
        let c = ConnectivityMatrix(Array2::eye(3));
        assert!(build_graph("s", &c, 0.2, Array2::zeros((2, 1)), Label::Asd, names(3)).is_err());
        assert!(build_graph("s", &c, 0.2, Array2::zeros((3, 1)), Label::Asd, names(2)).is_err());
        assert!(build_graph("s", &c, 1.5, Array2::zeros((3, 1)), Label::Asd, names(3)).is_err());
    }

    #[test]
    fn feature_modes() {
        let n = 116;
        let conn = ConnectivityMatrix(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.01 * ((i + j) % 7) as f64 }));
        let series = ts(Array2::from_shape_fn((250, n), |(t, r)| (t * r) as f64));
        let x = node_features(&conn, &series, FeatureMode::CorrelationProfile).unwrap();
        assert_eq!(x.dim(), (n, n));
        assert_eq!(x.row(5), conn.0.row(5));
        let x = node_features(&conn, &series, FeatureMode::CorrelationPlusSeries(200)).unwrap();
        assert_eq!(x.dim(), (116, 316));
        assert_eq!(x[[3, 116 + 10]], 30.0);
        let x0 = node_features(&conn, &series, FeatureMode::CorrelationPlusSeries(0)).unwrap();
        assert_eq!(x0, conn.0);
        // shorter series are zero padded
        let short = ts(Array2::ones((3, n)));
        let x = node_features(&conn, &short, FeatureMode::CorrelationPlusSeries(5)).unwrap();
        assert_eq!(x[[0, n + 2]], 1.0);
        assert_eq!(x[[0, n + 3]], 0.0);
    }

    #[test]
    fn feature_mode_parsing() {
        assert_eq!("correlation-profile".parse::<FeatureMode>().unwrap(), FeatureMode::CorrelationProfile);
        assert_eq!(
            "correlation-plus-series(200)".parse::<FeatureMode>().unwrap(),
            FeatureMode::CorrelationPlusSeries(200)
        );
        assert_eq!(
            "correlation-plus-series:7".parse::<FeatureMode>().unwrap(),
            FeatureMode::CorrelationPlusSeries(7)
        );
        assert!("correlation-plus-series:-1".parse::<FeatureMode>().is_err());
        assert!("partial".parse::<FeatureMode>().is_err());
    }

    #[test]
    fn graph_json_round_trip() {
        let c = ConnectivityMatrix(array![[1.0, 0.5, -0.3], [0.5, 1.0, 0.1], [-0.3, 0.1, 1.0]]);
        let g = build_graph("sub-1", &c, 0.2, c.0.clone(), Label::Asd, names(3)).unwrap();
        let text = graph_to_json(&g);
        assert!(text.contains("\"edges\":[[0,1,0.5],[0,2,-0.3]]"), "{text}");
        assert_eq!(graph_from_json(&text).unwrap(), g);
        assert!(graph_from_json(&text.replace("[0,1,0.5]", "[0,0,0.5]")).is_err());
    }

    proptest! {
        #[test]
        fn pearson_is_affine_invariant(
            data in proptest::collection::vec(-5.0f64..5.0, 30),
            scale in 0.1f64..10.0,
            shift in -100.0f64..100.0,
            col in 0usize..3,
        ) {
            let a = Array2::from_shape_vec((10, 3), data).unwrap();
            prop_assume!(a.columns().into_iter().all(|c| c.iter().any(|&v| (v - c[0]).abs() > 1e-3)));
            let base = pearson_matrix(&ts(a.clone())).unwrap();
            let mut pos = a.clone();
            pos.column_mut(col).mapv_inplace(|v| scale * v + shift);
            let mut neg = a.clone();
            neg.column_mut(col).mapv_inplace(|v| -scale * v + shift);
            let p = pearson_matrix(&ts(pos)).unwrap();
            let q = pearson_matrix(&ts(neg)).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((p.0[[i, j]] - base.0[[i, j]]).abs() <= 1e-9);
                    let flip = if (i == col) != (j == col) { -1.0 } else { 1.0 };
                    prop_assert!((q.0[[i, j]] - flip * base.0[[i, j]]).abs() <= 1e-9);
                    prop_assert!((base.0[[i, j]] - base.0[[j, i]]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn edge_count_is_monotone_in_threshold(
            data in proptest::collection::vec(-1.0f64..1.0, 15),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let mut m = Array2::eye(6);
            let mut k = 0;
            for i in 0..6 {
                for j in i + 1..6 {
                    m[[i, j]] = data[k];
                    m[[j, i]] = data[k];
                    k += 1;
                }
            }
            let c = ConnectivityMatrix(m);
            let (lo, hi) = (t1.min(t2), t1.max(t2));
            let gl = build_graph("s", &c, lo, Array2::zeros((6, 1)), Label::Asd, names(6)).unwrap();
            let gh = build_graph("s", &c, hi, Array2::zeros((6, 1)), Label::Asd, names(6)).unwrap();
            prop_assert!(gh.edges.len() <= gl.edges.len());
            prop_assert!(gh.edges.iter().all(|e| e.weight.abs() >= hi));
            let a = gh.adjacency();
            prop_assert!(a == a.t().to_owned());
        }
    }
}
