//! Layer primitives expressed on the autodiff tape.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, RngCore};

use crate::autodiff::{Axis, SparseMatrix, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Elu,
}

pub fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Elu => tape.elu(x),
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` for a symmetric binary adjacency.
pub fn normalize_adjacency(a: &Array2<u8>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Data(format!("adjacency is {:?}, not square", a.dim())));
    }
    if a != a.t() {
        return Err(Error::Data("adjacency is not symmetric".into()));
    }
    let mut tilde = a.mapv(f64::from);
    for i in 0..n {
        tilde[[i, i]] = 1.0;
    }
    let inv_sqrt: Vec<f64> = tilde.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| inv_sqrt[i] * tilde[[i, j]] * inv_sqrt[j]))
}

/// Sparse form of [`normalize_adjacency`] for an undirected edge list on `n` nodes.
pub fn normalized_adjacency_sparse(n: usize, edges: &[(usize, usize)]) -> Result<SparseMatrix> {
    let mut degree = vec![1.0; n];
    for &(i, j) in edges {
        degree[i] += 1.0;
        degree[j] += 1.0;
    }
    let inv: Vec<f64> = degree.iter().map(|d: &f64| 1.0 / d.sqrt()).collect();
    let mut entries = Vec::with_capacity(n + 2 * edges.len());
    for (i, &v) in inv.iter().enumerate() {
        entries.push((i, i, v * v));
    }
    for &(i, j) in edges {
        let w = inv[i] * inv[j];
        entries.push((i, j, w));
        entries.push((j, i, w));
    }
    Ok(SparseMatrix::new(n, n, entries)?)
}

/// `σ(Â H W)`.
pub fn gcn_layer(tape: &mut Tape, h: Var, a_norm: &Arc<SparseMatrix>, w: Var, act: Activation) -> Result<Var> {
    let hw = tape.matmul(h, w)?;
    let out = tape.sparse_matmul(a_norm.clone(), hw)?;
    Ok(activate(tape, out, act))
}

/// Directed message-passing edges, self-loops included; edge `e` sends
/// from `src[e]` into `dst[e]`.
#[derive(Clone, Debug)]
pub struct EdgeIndex {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub n_nodes: usize,
}

impl EdgeIndex {
    /// Both directions of every undirected edge, then one self-loop per node.
    pub fn with_self_loops(n_nodes: usize, undirected: &[(usize, usize)]) -> Self {
        let mut src = Vec::with_capacity(2 * undirected.len() + n_nodes);
        let mut dst = Vec::with_capacity(src.capacity());
        for &(i, j) in undirected {
            src.extend([i, j]);
            dst.extend([j, i]);
        }
        src.extend(0..n_nodes);
        dst.extend(0..n_nodes);
        Self { src: src.into(), dst: dst.into(), n_nodes }
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// `(K·d) × K` matrix summing each head's block of columns.
fn head_sum_matrix(heads: usize, head_dim: usize) -> Tensor {
    let mut s = Tensor::zeros(heads * head_dim, heads);
    for h in 0..heads {
        for c in 0..head_dim {
            s.set(h * head_dim + c, h, 1.0);
        }
    }
    s
}

fn check_heads(tape: &Tape, z: Var, attn_dst: Var, attn_src: Var, heads: usize) -> Result<usize> {
    let width = tape.shape(z)[1];
    if heads == 0 || !width.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {width} is not divisible into {heads} heads")));
    }
    for a in [attn_dst, attn_src] {
        if tape.shape(a) != [1, width] {
            return Err(Error::Data(format!(
                "attention vector shape {:?}, expected [1, {width}]",
                tape.shape(a)
            )));
        }
    }
    Ok(width / heads)
}

/// Attention coefficients (`E × K`) given projected features `Z = H W`.
///
/// `e = LeakyReLU(a_dstᵀ z_dst + a_srcᵀ z_src)`, normalised by softmax over
/// each destination's incoming edges.
pub fn gat_attention(
    tape: &mut Tape,
    z: Var,
    attn_dst: Var,
    attn_src: Var,
    heads: usize,
    slope: f64,
    edges: &EdgeIndex,
) -> Result<Var> {
    let head_dim = check_heads(tape, z, attn_dst, attn_src, heads)?;
    let s = tape.constant(head_sum_matrix(heads, head_dim));
    let zd = tape.mul(z, attn_dst)?;
    let score_dst = tape.matmul(zd, s)?;
    let zs = tape.mul(z, attn_src)?;
    let score_src = tape.matmul(zs, s)?;
    let ed = tape.gather_rows(score_dst, edges.dst.clone())?;
    let es = tape.gather_rows(score_src, edges.src.clone())?;
    let e = tape.add(ed, es)?;
    let e = tape.leaky_relu(e, slope);
    Ok(tape.segment_softmax(e, edges.dst.clone(), edges.n_nodes)?)
}

pub struct GatOutput {
    /// `N × (K·d_head)`, heads concatenated, no activation.
    pub output: Var,
    /// `E × K` coefficients in edge order.
    pub alpha: Var,
}

/// Multi-head graph attention, heads concatenated.
#[allow(clippy::too_many_arguments)]
pub fn gat_layer(
    tape: &mut Tape,
    h: Var,
    w: Var,
    attn_dst: Var,
    attn_src: Var,
    heads: usize,
    slope: f64,
    edges: &EdgeIndex,
) -> Result<GatOutput> {
    if tape.shape(h)[0] != edges.n_nodes {
        return Err(Error::Data(format!(
            "feature matrix has {} rows for {} nodes",
            tape.shape(h)[0],
            edges.n_nodes
        )));
    }
    let z = tape.matmul(h, w)?;
    let alpha = gat_attention(tape, z, attn_dst, attn_src, heads, slope, edges)?;
    let output = tape.edge_aggregate(alpha, z, edges.src.clone(), edges.dst.clone(), edges.n_nodes)?;
    Ok(GatOutput { output, alpha })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(width: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::ones(1, width),
            beta: Tensor::zeros(1, width),
            running_mean: Tensor::zeros(1, width),
            running_var: Tensor::ones(1, width),
            momentum,
            eps,
        }
    }

    /// Exponential moving update of the running statistics.
    pub fn commit(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        self.running_mean = self.running_mean.zip_map(&stats.mean, |r, b| (1.0 - m) * r + m * b);
        self.running_var = self.running_var.zip_map(&stats.var_unbiased, |r, b| (1.0 - m) * r + m * b);
    }
}

/// Statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var_unbiased: Tensor,
}

/// Normalise each column over the rows of `x`. Train mode uses the biased
/// batch variance and also returns the statistics for [`BatchNormState::commit`].
pub fn batch_norm(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    state: &BatchNormState,
    mode: Mode,
) -> Result<(Var, Option<BatchStats>)> {
    let [n, c] = tape.shape(x);
    match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::Data("batch norm in train mode needs at least 2 rows".into()));
            }
            let mean = tape.mean(x, Some(Axis::Rows));
            let xc = tape.sub(x, mean)?;
            let sq = tape.mul(xc, xc)?;
            let var = tape.mean(sq, Some(Axis::Rows));
            let eps = tape.constant(Tensor::full(1, c, state.eps));
            let ve = tape.add(var, eps)?;
            let inv = tape.powf(ve, -0.5);
            let xhat = tape.mul(xc, inv)?;
            let scaled = tape.mul(xhat, gamma)?;
            let out = tape.add(scaled, beta)?;
            let k = n as f64 / (n as f64 - 1.0);
            let stats = BatchStats {
                mean: tape.value(mean).clone(),
                var_unbiased: tape.value(var).map(|v| v * k),
            };
            Ok((out, Some(stats)))
        }
        Mode::Eval => {
            let shift = tape.constant(state.running_mean.map(|m| -m));
            let inv = tape.constant(state.running_var.map(|v| 1.0 / (v + state.eps).sqrt()));
            let xc = tape.add(x, shift)?;
            let xhat = tape.mul(xc, inv)?;
            let scaled = tape.mul(xhat, gamma)?;
            Ok((tape.add(scaled, beta)?, None))
        }
    }
}

/// Inverted dropout. Identity in eval mode or when `p == 0`.
pub fn dropout(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut dyn RngCore) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {p}")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let [r, c] = tape.shape(x);
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.random_bool(p) { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(r, c, mask)?);
    Ok(tape.mul(x, mask)?)
}

/// `B × N` averaging matrix for a node→graph assignment.
pub fn pooling_matrix(assignment: &[usize], n_graphs: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; n_graphs];
    for &g in assignment {
        if g >= n_graphs {
            return Err(Error::Data(format!("node assigned to graph {g} of {n_graphs}")));
        }
        counts[g] += 1;
    }
    if let Some(g) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("graph {g} has no nodes")));
    }
    let mut p = Tensor::zeros(n_graphs, assignment.len());
    for (node, &g) in assignment.iter().enumerate() {
        p.set(g, node, 1.0 / counts[g] as f64);
    }
    Ok(p)
}

pub fn global_mean_pool(tape: &mut Tape, h: Var, assignment: &[usize], n_graphs: usize) -> Result<Var> {
    if assignment.len() != tape.shape(h)[0] {
        return Err(Error::Data(format!(
            "{} assignments for {} nodes",
            assignment.len(),
            tape.shape(h)[0]
        )));
    }
    let p = tape.constant(pooling_matrix(assignment, n_graphs)?);
    Ok(tape.matmul(p, h)?)
}

/// `x W + b`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    Ok(tape.add(xw, b)?)
}
