//! Graph layers and the two end-to-end classifiers.
//!
//! A classifier is a stack of `n_blocks` blocks, each
//! `conv → BatchNorm → ELU → Dropout`, followed by global mean pooling,
//! `FC1 → ReLU → Dropout → FC2 → log-softmax`. The conv is multi-head graph
//! attention (heads concatenated) for [`ModelKind::Gat`] and a normalised
//! graph convolution of the same width for [`ModelKind::Gcn`].

pub mod checkpoint;
pub mod layers;

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Coordinates, GradCheckReport, SparseMatrix, Tape, Tensor, TensorError, Var};
use crate::connectome::BrainGraph;
use crate::error::{Error, Result};
use crate::ingest::Label;

pub use layers::{
    batch_norm, dropout, gat_attention, gat_layer, gcn_layer, global_mean_pool, normalize_adjacency,
    normalized_adjacency_sparse, Activation, BatchNormState, BatchStats, EdgeIndex, GatOutput, Mode,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gat,
    Gcn,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(ModelKind::Gat),
            "gcn" => Ok(ModelKind::Gcn),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architecture hyperparameters. [`ArchConfig::new`] gives the reference
/// sizes: 7 blocks of 8 heads × 256, FC 2048 → 1024 → 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub n_blocks: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub fc_hidden: usize,
    /// Dropout after the first block.
    pub dropout_first: f64,
    /// Dropout after later blocks and after FC1.
    pub dropout: f64,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl ArchConfig {
    pub fn new(kind: ModelKind, input_dim: usize) -> Self {
        Self {
            kind,
            input_dim,
            n_blocks: 7,
            heads: 8,
            head_dim: 256,
            fc_hidden: 1024,
            dropout_first: 0.1,
            dropout: 0.2,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn dropout_after(&self, block: usize) -> f64 {
        if block == 0 {
            self.dropout_first
        } else {
            self.dropout
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("input_dim", self.input_dim),
            ("n_blocks", self.n_blocks),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("fc_hidden", self.fc_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        for (name, p) in [("dropout_first", self.dropout_first), ("dropout", self.dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("batch norm needs eps > 0 and momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// `d_in × (K·d_head)`.
    pub weight: Tensor,
    /// Destination and source halves of the attention vectors, `1 × (K·d_head)`
    /// each; absent for GCN blocks.
    pub attn: Option<(Tensor, Tensor)>,
    pub bn: BatchNormState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub arch: ArchConfig,
    pub blocks: Vec<Block>,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    blocks: Vec<BoundBlock>,
    fc1_weight: Var,
    fc1_bias: Var,
    fc2_weight: Var,
    fc2_bias: Var,
    all: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
struct BoundBlock {
    weight: Var,
    attn: Option<(Var, Var)>,
    gamma: Var,
    beta: Var,
}

impl Bound {
    /// Every parameter handle in [`Classifier::params`] order.
    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

/// A mini-batch of graphs merged into one disconnected graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub features: Tensor,
    pub labels: Vec<Label>,
    pub ids: Vec<String>,
    /// Node offsets; graph `g` owns nodes `offsets[g]..offsets[g + 1]`.
    pub offsets: Vec<usize>,
    pub assignment: Vec<usize>,
    pub edges: EdgeIndex,
    /// Edge offsets into `edges`, per graph.
    pub edge_offsets: Vec<usize>,
    pub gcn_adjacency: Arc<SparseMatrix>,
}

impl GraphBatch {
    pub fn new(graphs: &[&BrainGraph]) -> Result<Self> {
        let first = graphs.first().ok_or_else(|| Error::Data("empty graph batch".into()))?;
        let d = first.feature_dim();
        let n_total: usize = graphs.iter().map(|g| g.n_nodes()).sum();
        let mut features = Vec::with_capacity(n_total * d);
        let mut offsets = vec![0];
        let mut assignment = Vec::with_capacity(n_total);
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut edge_offsets = vec![0];
        let mut undirected = Vec::new();
        for (gi, g) in graphs.iter().enumerate() {
            if g.feature_dim() != d {
                return Err(Error::Data(format!(
                    "graph {} has feature width {}, batch uses {d}",
                    g.id,
                    g.feature_dim()
                )));
            }
            let base = *offsets.last().unwrap();
            features.extend(g.features.iter());
            let local: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.i, e.j)).collect();
            let idx = EdgeIndex::with_self_loops(g.n_nodes(), &local);
            src.extend(idx.src.iter().map(|s| s + base));
            dst.extend(idx.dst.iter().map(|s| s + base));
            undirected.extend(local.iter().map(|&(i, j)| (i + base, j + base)));
            assignment.extend(std::iter::repeat_n(gi, g.n_nodes()));
            offsets.push(base + g.n_nodes());
            edge_offsets.push(src.len());
        }
        Ok(Self {
            features: Tensor::new(n_total, d, features)?,
            labels: graphs.iter().map(|g| g.label).collect(),
            ids: graphs.iter().map(|g| g.id.clone()).collect(),
            offsets,
            assignment,
            edges: EdgeIndex { src: src.into(), dst: dst.into(), n_nodes: n_total },
            edge_offsets,
            gcn_adjacency: Arc::new(normalized_adjacency_sparse(n_total, &undirected)?),
        })
    }

    pub fn n_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.assignment.len()
    }
}

/// Head-averaged (and per-head) attention of one block on one graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub layer_index: usize,
    pub graph_index: usize,
    /// `(src, dst)` in graph-local node indices, self-loops included.
    pub edges: Vec<(usize, usize)>,
    pub alpha: Vec<f64>,
    pub alpha_heads: Vec<Vec<f64>>,
}

pub struct ForwardOutput {
    /// `B × 2` log-probabilities.
    pub log_probs: Var,
    /// FC1 activations after ReLU, `B × fc_hidden`.
    pub embeddings: Var,
    /// One entry per block in train mode; empty in eval mode.
    pub batch_stats: Vec<BatchStats>,
    pub attention: Vec<AttentionRecord>,
}

/// Eval-mode outputs as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub log_probs: Tensor,
    pub embeddings: Tensor,
}

impl Prediction {
    /// Class 1 when `log p1 >= log p0`.
    pub fn predicted(&self) -> Vec<Label> {
        (0..self.log_probs.rows())
            .map(|r| if self.log_probs.get(r, 1) >= self.log_probs.get(r, 0) { Label::Asd } else { Label::Control })
            .collect()
    }

    pub fn positive_scores(&self) -> Vec<f64> {
        (0..self.log_probs.rows()).map(|r| self.log_probs.get(r, 1).exp()).collect()
    }
}

impl Classifier {
    /// Glorot-uniform weights and attention vectors, zero biases.
    pub fn new<R: Rng + ?Sized>(arch: ArchConfig, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let width = arch.width();
        let mut blocks = Vec::with_capacity(arch.n_blocks);
        for b in 0..arch.n_blocks {
            let d_in = if b == 0 { arch.input_dim } else { width };
            let weight = Tensor::glorot(d_in, width, d_in, width, rng);
            let attn = match arch.kind {
                ModelKind::Gat => {
                    // each head's vector a_h has 2·d_head entries and one output
                    let bound = (6.0 / (2 * arch.head_dim + 1) as f64).sqrt();
                    Some((Tensor::uniform(1, width, bound, rng), Tensor::uniform(1, width, bound, rng)))
                }
                ModelKind::Gcn => None,
            };
            let bn = BatchNormState::new(width, arch.bn_momentum, arch.bn_eps);
            blocks.push(Block { weight, attn, bn });
        }
        let fc1_weight = Tensor::glorot(width, arch.fc_hidden, width, arch.fc_hidden, rng);
        let fc2_weight = Tensor::glorot(arch.fc_hidden, 2, arch.fc_hidden, 2, rng);
        Ok(Self {
            fc1_bias: Tensor::zeros(1, arch.fc_hidden),
            fc2_bias: Tensor::zeros(1, 2),
            arch,
            blocks,
            fc1_weight,
            fc2_weight,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            names.push(format!("block{i}.weight"));
            if b.attn.is_some() {
                names.push(format!("block{i}.attn_dst"));
                names.push(format!("block{i}.attn_src"));
            }
            names.push(format!("block{i}.bn.gamma"));
            names.push(format!("block{i}.bn.beta"));
        }
        names.extend(["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"].map(String::from));
        names
    }

    /// Trainable tensors in a fixed order matching [`Classifier::param_names`].
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.weight);
            if let Some((d, s)) = &b.attn {
                out.push(d);
                out.push(s);
            }
            out.push(&b.bn.gamma);
            out.push(&b.bn.beta);
        }
        out.extend([&self.fc1_weight, &self.fc1_bias, &self.fc2_weight, &self.fc2_bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.state_mut().0
    }

    pub fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Non-trainable batch-norm statistics.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("block{i}.bn.running_var"), &b.bn.running_var));
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.state_mut().1
    }

    /// Parameters and buffers, each in their canonical order.
    pub fn state_mut(&mut self) -> (Vec<&mut Tensor>, Vec<&mut Tensor>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for b in &mut self.blocks {
            params.push(&mut b.weight);
            if let Some((d, s)) = &mut b.attn {
                params.push(d);
                params.push(s);
            }
            params.push(&mut b.bn.gamma);
            params.push(&mut b.bn.beta);
            buffers.push(&mut b.bn.running_mean);
            buffers.push(&mut b.bn.running_var);
        }
        params.extend([&mut self.fc1_weight, &mut self.fc1_bias, &mut self.fc2_weight, &mut self.fc2_bias]);
        (params, buffers)
    }

    /// Record every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars: Vec<Var> = self.params().into_iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
        self.bind_vars(&vars).expect("parameter count matches by construction")
    }

    /// Interpret existing handles (in [`Classifier::params`] order) as this model's parameters.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        let expected = self.params().len();
        if vars.len() != expected {
            return Err(Error::Data(format!("{} parameter handles, model has {expected}", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let weight = next();
            let attn = b.attn.as_ref().map(|_| (next(), next()));
            let gamma = next();
            let beta = next();
            blocks.push(BoundBlock { weight, attn, gamma, beta });
        }
        Ok(Bound {
            blocks,
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
            all: vars.to_vec(),
        })
    }

    /// Full forward pass. `rng` supplies dropout masks in train mode.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &GraphBatch,
        mode: Mode,
        rng: &mut dyn RngCore,
        extract_attention: bool,
    ) -> Result<ForwardOutput> {
        if batch.features.cols() != self.arch.input_dim {
            return Err(Error::Data(format!(
                "feature width {} does not match model input {}",
                batch.features.cols(),
                self.arch.input_dim
            )));
        }
        let mut h = tape.constant(batch.features.clone());
        let mut batch_stats = Vec::new();
        let mut attention = Vec::new();
        for (i, (block, bb)) in self.blocks.iter().zip(&bound.blocks).enumerate() {
            let conv = match bb.attn {
                Some((ad, asrc)) => {
                    let out = gat_layer(
                        tape,
                        h,
                        bb.weight,
                        ad,
                        asrc,
                        self.arch.heads,
                        self.arch.leaky_slope,
                        &batch.edges,
                    )?;
                    if extract_attention {
                        attention.extend(split_attention(tape.value(out.alpha), batch, i));
                    }
                    out.output
                }
                None => gcn_layer(tape, h, &batch.gcn_adjacency, bb.weight, Activation::Identity)?,
            };
            let (normed, stats) = batch_norm(tape, conv, bb.gamma, bb.beta, &block.bn, mode)?;
            batch_stats.extend(stats);
            let act = tape.elu(normed);
            h = dropout(tape, act, self.arch.dropout_after(i), mode, rng)?;
        }
        let pooled = global_mean_pool(tape, h, &batch.assignment, batch.n_graphs())?;
        let fc1 = layers::linear(tape, pooled, bound.fc1_weight, bound.fc1_bias)?;
        let embeddings = tape.relu(fc1);
        let dropped = dropout(tape, embeddings, self.arch.dropout, mode, rng)?;
        let logits = layers::linear(tape, dropped, bound.fc2_weight, bound.fc2_bias)?;
        let log_probs = tape.log_softmax(logits, Axis::Cols);
        Ok(ForwardOutput { log_probs, embeddings, batch_stats, attention })
    }

    /// Fold train-mode statistics into the running averages.
    pub fn commit_batch_stats(&mut self, stats: &[BatchStats]) {
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            b.bn.commit(s);
        }
    }

    pub fn predict(&self, batch: &GraphBatch) -> Result<Prediction> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, batch, Mode::Eval, &mut idle_rng(), false)?;
        Ok(Prediction {
            log_probs: tape.value(out.log_probs).clone(),
            embeddings: tape.value(out.embeddings).clone(),
        })
    }

    /// Eval-mode attention coefficients for every block and graph.
    pub fn attention(&self, batch: &GraphBatch) -> Result<Vec<AttentionRecord>> {
        if self.arch.kind != ModelKind::Gat {
            return Err(Error::Config("attention extraction needs a GAT model".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = self.forward(&mut tape, &bound, batch, Mode::Eval, &mut idle_rng(), true)?;
        Ok(out.attention)
    }

    /// Mean negative log-likelihood in eval mode.
    pub fn loss(&self, batch: &GraphBatch) -> Result<f64> {
        let p = self.predict(batch)?;
        Ok(nll_value(&p.log_probs, &batch.labels))
    }
}

/// Generator handed to eval-mode passes, which draw no randomness.
fn idle_rng() -> rand_chacha::ChaCha8Rng {
    crate::seeds::stream(0, 0)
}

fn split_attention(alpha: &Tensor, batch: &GraphBatch, layer: usize) -> Vec<AttentionRecord> {
    let heads = alpha.cols();
    (0..batch.n_graphs())
        .map(|g| {
            let base = batch.offsets[g];
            let range = batch.edge_offsets[g]..batch.edge_offsets[g + 1];
            let edges = range
                .clone()
                .map(|e| (batch.edges.src[e] - base, batch.edges.dst[e] - base))
                .collect();
            let alpha_heads: Vec<Vec<f64>> = range.clone().map(|e| alpha.row_slice(e).to_vec()).collect();
            let alpha = alpha_heads.iter().map(|r| r.iter().sum::<f64>() / heads as f64).collect();
            AttentionRecord { layer_index: layer, graph_index: g, edges, alpha, alpha_heads }
        })
        .collect()
}

fn one_hot(labels: &[Label]) -> Tensor {
    let mut t = Tensor::zeros(labels.len(), 2);
    for (r, l) in labels.iter().enumerate() {
        t.set(r, l.index(), 1.0);
    }
    t
}

/// Mean negative log-likelihood of `labels` under `B × 2` log-probabilities, on the tape.
pub fn nll(tape: &mut Tape, log_probs: Var, labels: &[Label]) -> Result<Var> {
    if tape.shape(log_probs) != [labels.len(), 2] {
        return Err(Error::Data(format!(
            "log-probabilities {:?} for {} labels",
            tape.shape(log_probs),
            labels.len()
        )));
    }
    let mask = tape.constant(one_hot(labels));
    let picked = tape.mul(log_probs, mask)?;
    let total = tape.sum(picked, None);
    Ok(tape.scale(total, -1.0 / labels.len() as f64))
}

pub fn nll_value(log_probs: &Tensor, labels: &[Label]) -> f64 {
    let total: f64 = labels.iter().enumerate().map(|(r, l)| log_probs.get(r, l.index())).sum();
    -total / labels.len() as f64
}

/// Random graph with Erdős–Rényi edges and uniform features in `[-1, 1]`.
pub fn random_graph(id: &str, n_nodes: usize, feature_dim: usize, edge_prob: f64, label: Label, seed: u64) -> BrainGraph {
    use crate::connectome::Edge;
    let mut rng = crate::seeds::stream(seed, 7);
    let mut edges = Vec::new();
    for i in 0..n_nodes {
        for j in i + 1..n_nodes {
            if rng.random_bool(edge_prob) {
                edges.push(Edge { i, j, weight: rng.random_range(-1.0..1.0) });
            }
        }
    }
    BrainGraph {
        id: id.to_string(),
        label,
        region_names: crate::ingest::default_region_names(n_nodes),
        edges,
        features: Tensor::uniform(n_nodes, feature_dim, 1.0, &mut rng).to_array(),
    }
}

/// Two random 5-node graphs, one per class, for whole-model gradient checks.
pub fn micro_batch(input_dim: usize, seed: u64) -> Result<GraphBatch> {
    let graphs = [
        random_graph("g0", 5, input_dim, 0.5, Label::Control, seed),
        random_graph("g1", 5, input_dim, 0.5, Label::Asd, seed.wrapping_add(1)),
    ];
    GraphBatch::new(&[&graphs[0], &graphs[1]])
}

/// Finite-difference check of the NLL of `model` on a micro-batch with
/// every parameter as an input. Batch norm runs in eval mode so that the
/// loss is a fixed function of the parameters.
pub fn gradient_check_model(model: &Classifier, batch: &GraphBatch, coords: &Coordinates) -> Result<GradCheckReport> {
    let inputs: Vec<Tensor> = model.params().into_iter().cloned().collect();
    let f = |tape: &mut Tape, vars: &[Var]| -> std::result::Result<Var, TensorError> {
        let run = |tape: &mut Tape| -> Result<Var> {
            let bound = model.bind_vars(vars)?;
            let out = model.forward(tape, &bound, batch, Mode::Eval, &mut idle_rng(), false)?;
            nll(tape, out.log_probs, &batch.labels)
        };
        run(tape).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => TensorError::InvalidArgument(other.to_string()),
        })
    };
    Ok(crate::autodiff::finite_difference_check_many(f, &inputs, 1e-5, coords)?)
}

#[cfg(test)]
mod tests;
