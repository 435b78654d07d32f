use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::TensorError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Dimension a reduction or normalisation runs over.
///
/// `Rows` is axis 0 (collapses rows, yields `1 × C`), `Cols` is axis 1
/// (collapses columns, yields `R × 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Constant sparse matrix in coordinate form.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        entries: Vec<(usize, usize, f64)>,
    ) -> Result<Self, TensorError> {
        if let Some(&(r, c, _)) = entries.iter().find(|(r, c, _)| *r >= n_rows || *c >= n_cols) {
            return Err(TensorError::InvalidArgument(format!(
                "sparse entry ({r},{c}) outside {n_rows}x{n_cols}"
            )));
        }
        Ok(Self { n_rows, n_cols, entries })
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(self.n_rows, self.n_cols);
        for &(r, c, v) in &self.entries {
            t.set(r, c, t.get(r, c) + v);
        }
        t
    }

    fn apply(&self, x: &Tensor, transpose: bool) -> Tensor {
        let out_rows = if transpose { self.n_cols } else { self.n_rows };
        let cols = x.cols();
        let mut out = Tensor::zeros(out_rows, cols);
        for &(r, c, v) in &self.entries {
            let (dst, src) = if transpose { (c, r) } else { (r, c) };
            let src_row = x.row_slice(src).to_vec();
            let dst_row = &mut out.data_mut()[dst * cols..(dst + 1) * cols];
            for (o, s) in dst_row.iter_mut().zip(&src_row) {
                *o += v * s;
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>, Axis),
    Exp(Var),
    Log(Var),
    Powf(Var, f64),
    Sum(Var, Option<Axis>),
    Mean(Var, Option<Axis>),
    Max(Var, Vec<usize>),
    Transpose(Var),
    GatherRows(Var, Arc<[usize]>),
    ScatterAddRows(Var, Arc<[usize]>),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    SegmentSoftmax(Var, Arc<[usize]>, usize),
    LogSoftmax(Var, Axis),
    SparseMatMul(Arc<SparseMatrix>, Var),
    EdgeAggregate {
        alpha: Var,
        values: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in evaluation order.
///
/// Nodes are appended as operations run, so the node list is always
/// topologically ordered and a single reverse sweep computes gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Total derivative for `v`; zeros when `v` does not influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() }
}

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast, TensorError> {
    if a.shape() == b.shape() {
        Ok(Broadcast::None)
    } else if b.rows() == 1 && b.cols() == a.cols() {
        Ok(Broadcast::Rhs)
    } else if a.rows() == 1 && a.cols() == b.cols() {
        Ok(Broadcast::Lhs)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn binary_broadcast(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match kind {
        Broadcast::None => a.zip_map(b, f),
        Broadcast::Rhs => {
            let c = a.cols();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % c]))
                .collect();
            Tensor::new(a.rows(), c, data).expect("shape preserved")
        }
        Broadcast::Lhs => {
            let c = b.cols();
            let data = b
                .data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(a.data()[i % c], y))
                .collect();
            Tensor::new(b.rows(), c, data).expect("shape preserved")
        }
    }
}

fn sum_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = vec![0.0; c];
    for (i, x) in t.data().iter().enumerate() {
        out[i % c] += x;
    }
    Tensor::row(out)
}

fn sum_cols(t: &Tensor) -> Tensor {
    Tensor::column((0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect())
}

fn reduce_sum(t: &Tensor, axis: Option<Axis>) -> Tensor {
    match axis {
        None => Tensor::scalar(t.sum()),
        Some(Axis::Rows) => sum_rows(t),
        Some(Axis::Cols) => sum_cols(t),
    }
}

/// Expand `g` (the shape of a reduction result) back over `shape`.
fn expand(g: &Tensor, shape: [usize; 2], axis: Option<Axis>) -> Tensor {
    let [r, c] = shape;
    let data = (0..r * c)
        .map(|i| match axis {
            None => g.data()[0],
            Some(Axis::Rows) => g.data()[i % c],
            Some(Axis::Cols) => g.data()[i / c],
        })
        .collect();
    Tensor::new(r, c, data).expect("shape preserved")
}

fn reduction_count(shape: [usize; 2], axis: Option<Axis>) -> f64 {
    match axis {
        None => (shape[0] * shape[1]) as f64,
        Some(Axis::Rows) => shape[0] as f64,
        Some(Axis::Cols) => shape[1] as f64,
    }
}

fn check_indices(indices: &[usize], bound: usize, what: &str) -> Result<(), TensorError> {
    match indices.iter().find(|&&i| i >= bound) {
        Some(i) => Err(TensorError::InvalidArgument(format!(
            "{what} index {i} out of range (< {bound})"
        ))),
        None => Ok(()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Record an input. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = gemm(ta, false, tb, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum; either side may be a `1 × C` row broadcast over rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind("add", ta, tb)?;
        let out = binary_broadcast(ta, tb, kind, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let kind = broadcast_kind("mul", ta, tb)?;
        let out = binary_broadcast(ta, tb, kind, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::InvalidArgument("concat of zero tensors".into()))?;
        let t0 = self.value(first);
        let out = match axis {
            Axis::Rows => {
                let cols = t0.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != cols {
                        return Err(mismatch("concat", t0, t));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(rows, cols, data)?
            }
            Axis::Cols => {
                let rows = t0.rows();
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != rows {
                        return Err(mismatch("concat", t0, t));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::new(rows, cols, data)?
            }
        };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        let rg = self.rg(a);
        self.push(out, Op::Log(a), rg)
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let out = self.value(a).map(|x| x.powf(p));
        let rg = self.rg(a);
        self.push(out, Op::Powf(a, p), rg)
    }

    /// Sum over `axis`, or over every entry when `axis` is `None`.
    pub fn sum(&mut self, a: Var, axis: Option<Axis>) -> Var {
        let out = reduce_sum(self.value(a), axis);
        let rg = self.rg(a);
        self.push(out, Op::Sum(a, axis), rg)
    }

    pub fn mean(&mut self, a: Var, axis: Option<Axis>) -> Var {
        let t = self.value(a);
        let n = reduction_count(t.shape(), axis);
        let out = reduce_sum(t, axis).map(|x| x / n);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a, axis), rg)
    }

    /// Maximum along `axis`; the gradient flows to the first maximiser.
    pub fn max(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let [r, c] = t.shape();
        let (values, argmax): (Vec<f64>, Vec<usize>) = match axis {
            Axis::Rows => (0..c)
                .map(|j| {
                    let mut best = 0;
                    for i in 1..r {
                        if t.get(i, j) > t.get(best, j) {
                            best = i;
                        }
                    }
                    (t.get(best, j), best * c + j)
                })
                .unzip(),
            Axis::Cols => (0..r)
                .map(|i| {
                    let mut best = 0;
                    for j in 1..c {
                        if t.get(i, j) > t.get(i, best) {
                            best = j;
                        }
                    }
                    (t.get(i, best), i * c + best)
                })
                .unzip(),
        };
        let out = match axis {
            Axis::Rows => Tensor::row(values),
            Axis::Cols => Tensor::column(values),
        };
        let rg = self.rg(a);
        self.push(out, Op::Max(a, argmax), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// `out[k] = a[indices[k]]`.
    pub fn gather_rows(&mut self, a: Var, indices: Arc<[usize]>) -> Result<Var, TensorError> {
        let t = self.value(a);
        check_indices(&indices, t.rows(), "gather_rows")?;
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument("gather_rows with no indices".into()));
        }
        let mut data = Vec::with_capacity(indices.len() * t.cols());
        for &i in indices.iter() {
            data.extend_from_slice(t.row_slice(i));
        }
        let out = Tensor::new(indices.len(), t.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows(a, indices), rg))
    }

    /// `out[indices[k]] += a[k]` into an `n_rows`-row zero matrix.
    pub fn scatter_add_rows(
        &mut self,
        a: Var,
        indices: Arc<[usize]>,
        n_rows: usize,
    ) -> Result<Var, TensorError> {
        let t = self.value(a);
        if indices.len() != t.rows() {
            return Err(TensorError::InvalidArgument(format!(
                "scatter_add_rows: {} indices for {} rows",
                indices.len(),
                t.rows()
            )));
        }
        check_indices(&indices, n_rows, "scatter_add_rows")?;
        let cols = t.cols();
        let mut out = Tensor::zeros(n_rows, cols);
        for (k, &i) in indices.iter().enumerate() {
            let src = t.row_slice(k);
            for (o, s) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                *o += s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::ScatterAddRows(a, indices), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let rg = self.rg(a);
        self.push(out, Op::Elu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(out, Op::LeakyRelu(a, slope), rg)
    }

    /// Softmax of each column of `a` within groups of rows sharing a segment id.
    pub fn segment_softmax(
        &mut self,
        a: Var,
        segments: Arc<[usize]>,
        n_segments: usize,
    ) -> Result<Var, TensorError> {
        let t = self.value(a);
        if segments.len() != t.rows() {
            return Err(TensorError::InvalidArgument(format!(
                "segment_softmax: {} segment ids for {} rows",
                segments.len(),
                t.rows()
            )));
        }
        check_indices(&segments, n_segments, "segment")?;
        let k = t.cols();
        let mut counts = vec![0usize; n_segments];
        for &s in segments.iter() {
            counts[s] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(TensorError::EmptySegment(empty));
        }
        let mut seg_max = vec![f64::NEG_INFINITY; n_segments * k];
        for (e, &s) in segments.iter().enumerate() {
            for h in 0..k {
                let m = &mut seg_max[s * k + h];
                *m = m.max(t.get(e, h));
            }
        }
        let mut out = Tensor::zeros(t.rows(), k);
        let mut seg_sum = vec![0.0; n_segments * k];
        for (e, &s) in segments.iter().enumerate() {
            for h in 0..k {
                let v = (t.get(e, h) - seg_max[s * k + h]).exp();
                out.set(e, h, v);
                seg_sum[s * k + h] += v;
            }
        }
        for (e, &s) in segments.iter().enumerate() {
            for h in 0..k {
                out.set(e, h, out.get(e, h) / seg_sum[s * k + h]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentSoftmax(a, segments, n_segments), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: Axis) -> Var {
        let t = self.value(a);
        let src = if axis == Axis::Rows { t.transpose() } else { t.clone() };
        let mut out = src.clone();
        for r in 0..src.rows() {
            let row = src.row_slice(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for c in 0..src.cols() {
                out.set(r, c, src.get(r, c) - lse);
            }
        }
        if axis == Axis::Rows {
            out = out.transpose();
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a, axis), rg)
    }

    /// Product of a constant sparse matrix with `x`.
    pub fn sparse_matmul(&mut self, s: Arc<SparseMatrix>, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if s.n_cols != t.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_matmul",
                lhs: [s.n_rows, s.n_cols],
                rhs: t.shape(),
            });
        }
        let out = s.apply(t, false);
        let rg = self.rg(x);
        Ok(self.push(out, Op::SparseMatMul(s, x), rg))
    }

    /// Multi-head weighted neighbourhood sum.
    ///
    /// `alpha` is `E × K`, `values` is `N × (K·D)`. For every edge `e`
    /// and head `h`, adds `alpha[e, h] * values[src[e], head h block]` into
    /// row `dst[e]` of an `n_out × (K·D)` result.
    pub fn edge_aggregate(
        &mut self,
        alpha: Var,
        values: Var,
        src: Arc<[usize]>,
        dst: Arc<[usize]>,
        n_out: usize,
    ) -> Result<Var, TensorError> {
        let (ta, tv) = (self.value(alpha), self.value(values));
        let heads = ta.cols();
        if ta.rows() != src.len() || src.len() != dst.len() || tv.cols() % heads != 0 {
            return Err(mismatch("edge_aggregate", ta, tv));
        }
        check_indices(&src, tv.rows(), "edge source")?;
        check_indices(&dst, n_out, "edge destination")?;
        let width = tv.cols();
        let hd = width / heads;
        let mut out = Tensor::zeros(n_out, width);
        {
            let od = out.data_mut();
            for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                let srow = tv.row_slice(s);
                for h in 0..heads {
                    let w = ta.get(e, h);
                    let base = h * hd;
                    for c in base..base + hd {
                        od[d * width + c] += w * srow[c];
                    }
                }
            }
        }
        let rg = self.rg(alpha) || self.rg(values);
        Ok(self.push(out, Op::EdgeAggregate { alpha, values, src, dst }, rg))
    }

    /// Reverse sweep from a `1 × 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lt = self.value(loss);
        if lt.shape() != [1, 1] {
            return Err(TensorError::NonScalarLoss(lt.shape()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(node, &g, &mut grads);
        }

        // Only leaves keep gradients; intermediates were consumed above.
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    acc(*a, gemm(g, false, tb, true));
                }
                if self.rg(*b) {
                    acc(*b, gemm(ta, true, g, false));
                }
            }
            Op::Add(a, b) => {
                let kind = broadcast_kind("add", self.value(*a), self.value(*b)).expect("checked");
                let ga = if kind == Broadcast::Lhs { sum_rows(g) } else { g.clone() };
                let gb = if kind == Broadcast::Rhs { sum_rows(g) } else { g.clone() };
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let kind = broadcast_kind("mul", ta, tb).expect("checked");
                if self.rg(*a) {
                    let full = match kind {
                        Broadcast::Rhs => binary_broadcast(g, tb, Broadcast::Rhs, |x, y| x * y),
                        Broadcast::Lhs => sum_rows(&g.zip_map(tb, |x, y| x * y)),
                        Broadcast::None => g.zip_map(tb, |x, y| x * y),
                    };
                    acc(*a, full);
                }
                if self.rg(*b) {
                    let full = match kind {
                        Broadcast::Lhs => binary_broadcast(ta, g, Broadcast::Lhs, |x, y| x * y),
                        Broadcast::Rhs => sum_rows(&g.zip_map(ta, |x, y| x * y)),
                        Broadcast::None => g.zip_map(ta, |x, y| x * y),
                    };
                    acc(*b, full);
                }
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let [r, c] = self.shape(p);
                    let piece = match axis {
                        Axis::Rows => Tensor::new(
                            r,
                            c,
                            g.data()[offset * c..(offset + r) * c].to_vec(),
                        )
                        .expect("slice"),
                        Axis::Cols => {
                            let mut data = Vec::with_capacity(r * c);
                            for row in 0..r {
                                data.extend_from_slice(&g.row_slice(row)[offset..offset + c]);
                            }
                            Tensor::new(r, c, data).expect("slice")
                        }
                    };
                    offset += if *axis == Axis::Rows { r } else { c };
                    acc(p, piece);
                }
            }
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Powf(a, p) => {
                acc(*a, g.zip_map(self.value(*a), |x, y| x * p * y.powf(p - 1.0)))
            }
            Op::Sum(a, axis) => acc(*a, expand(g, self.shape(*a), *axis)),
            Op::Mean(a, axis) => {
                let shape = self.shape(*a);
                let n = reduction_count(shape, *axis);
                acc(*a, expand(g, shape, *axis).map(|x| x / n));
            }
            Op::Max(a, argmax) => {
                let [r, c] = self.shape(*a);
                let mut out = Tensor::zeros(r, c);
                for (k, &flat) in argmax.iter().enumerate() {
                    out.data_mut()[flat] += g.data()[k];
                }
                acc(*a, out);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::GatherRows(a, indices) => {
                let [r, c] = self.shape(*a);
                let mut out = Tensor::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    let src = g.row_slice(k);
                    for (o, s) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                acc(*a, out);
            }
            Op::ScatterAddRows(a, indices) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(indices.len() * c);
                for &i in indices.iter() {
                    data.extend_from_slice(g.row_slice(i));
                }
                acc(*a, Tensor::new(indices.len(), c, data).expect("shape"));
            }
            Op::Relu(a) => {
                acc(*a, g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }))
            }
            Op::Elu(a) => {
                let grad = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { x * y.exp() });
                acc(*a, grad);
            }
            Op::LeakyRelu(a, slope) => {
                let grad = g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { slope * x });
                acc(*a, grad);
            }
            Op::SegmentSoftmax(a, segments, n_segments) => {
                let y = &node.value;
                let k = y.cols();
                let mut dot = vec![0.0; n_segments * k];
                for (e, &s) in segments.iter().enumerate() {
                    for h in 0..k {
                        dot[s * k + h] += g.get(e, h) * y.get(e, h);
                    }
                }
                let mut out = Tensor::zeros(y.rows(), k);
                for (e, &s) in segments.iter().enumerate() {
                    for h in 0..k {
                        out.set(e, h, y.get(e, h) * (g.get(e, h) - dot[s * k + h]));
                    }
                }
                acc(*a, out);
            }
            Op::LogSoftmax(a, axis) => {
                let y = &node.value;
                let (gy, yy) = if *axis == Axis::Rows {
                    (g.transpose(), y.transpose())
                } else {
                    (g.clone(), y.clone())
                };
                let mut out = gy.clone();
                for r in 0..gy.rows() {
                    let gs: f64 = gy.row_slice(r).iter().sum();
                    for c in 0..gy.cols() {
                        out.set(r, c, gy.get(r, c) - yy.get(r, c).exp() * gs);
                    }
                }
                if *axis == Axis::Rows {
                    out = out.transpose();
                }
                acc(*a, out);
            }
            Op::SparseMatMul(s, x) => acc(*x, s.apply(g, true)),
            Op::EdgeAggregate { alpha, values, src, dst } => {
                let (ta, tv) = (self.value(*alpha), self.value(*values));
                let heads = ta.cols();
                let width = tv.cols();
                let hd = width / heads;
                if self.rg(*alpha) {
                    let mut ga = Tensor::zeros(ta.rows(), heads);
                    for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                        let (vrow, grow) = (tv.row_slice(s), g.row_slice(d));
                        for h in 0..heads {
                            let r = h * hd..(h + 1) * hd;
                            let dotp: f64 =
                                vrow[r.clone()].iter().zip(&grow[r]).map(|(a, b)| a * b).sum();
                            ga.set(e, h, dotp);
                        }
                    }
                    acc(*alpha, ga);
                }
                if self.rg(*values) {
                    let mut gv = Tensor::zeros(tv.rows(), width);
                    {
                        let gvd = gv.data_mut();
                        for (e, (&s, &d)) in src.iter().zip(dst.iter()).enumerate() {
                            let grow = g.row_slice(d);
                            for h in 0..heads {
                                let w = ta.get(e, h);
                                for c in h * hd..(h + 1) * hd {
                                    gvd[s * width + c] += w * grow[c];
                                }
                            }
                        }
                    }
                    acc(*values, gv);
                }
            }
        }
    }
}
