//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! nodes once in reverse and accumulates adjoints. Ops never fail at record
//! time: shape errors panic (they are programming errors inside the crate),
//! while non-finite values are remembered and surfaced by `backward` or
//! `check_finite` together with the op that produced them.

use std::borrow::Cow;

use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{KernelError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Relu(NodeId),
    Softmax { x: NodeId, causal: bool },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: NodeId, rows: Vec<usize> },
    IndexAdd { base: NodeId, src: NodeId, rows: Vec<usize> },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    MeanRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<(usize, usize)>, probs: Vec<f64> },
    TopKSoftmax { logits: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::IndexAdd { .. } => "index_add",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::TopKSoftmax { .. } => "topk_softmax",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. Leaves may borrow their values (parameters) for the
/// lifetime of the tape.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    nonfinite: Option<(usize, &'static str)>,
    kink_inputs: Vec<NodeId>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Selected indices and their softmax weights (over the selected logits only).
pub fn topk_softmax_row(row: &[f64], k: usize) -> (Vec<usize>, Vec<f64>) {
    let sel = top_k_indices(row, k);
    let mx = row[sel[0]];
    let exps: Vec<f64> = sel.iter().map(|&j| (row[j] - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    (sel, exps.into_iter().map(|e| e / z).collect())
}

/// Plain GeLU (tanh form), shared with code that runs outside a tape.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
}

/// Indices of the `k` largest entries, ties resolved toward the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx.truncate(k);
    idx
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            nonfinite: None,
            kink_inputs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = self.inputs_require_grad(&op);
        self.push_with(Cow::Owned(value), op, requires_grad)
    }

    fn push_with(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        if self.nonfinite.is_none() && !value.all_finite() {
            self.nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(id)
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |id: &NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::MatMulNt(a, b) | Op::Add(a, b) | Op::Mul(a, b) => rg(a) || rg(b),
            Op::AddRow(a, b) | Op::MulCol(a, b) => rg(a) || rg(b),
            Op::Scale(a, _) | Op::Gelu(a) | Op::Relu(a) | Op::MeanRows(a) | Op::Sum(a) | Op::Mean(a) => {
                rg(a)
            }
            Op::Softmax { x, .. } | Op::SliceCols { x, .. } => rg(x),
            Op::LayerNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            Op::Gather { table, .. } => rg(table),
            Op::IndexAdd { base, src, .. } => rg(base) || rg(src),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().any(rg),
            Op::CrossEntropy { logits, .. } | Op::TopKSoftmax { logits } => rg(logits),
        }
    }

    /// Records an owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push_with(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    /// Records a leaf that borrows its value.
    pub fn leaf_ref(&mut self, value: &'a Tensor, requires_grad: bool) -> NodeId {
        self.push_with(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out).expect("shape"), Op::MatMul(a, b))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, out).expect("shape"), Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "add shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.len(), vb.len(), "mul shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a single row (bias) to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let va = self.value(a);
        let r = self.value(row).data();
        let n = va.cols();
        assert_eq!(r.len(), n, "add_row width mismatch");
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> NodeId {
        let va = self.value(a);
        let c = self.value(col).data();
        let n = va.cols();
        assert_eq!(c.len(), va.rows(), "mul_col height mismatch");
        let mut data = va.data().to_vec();
        for (chunk, w) in data.chunks_mut(n).zip(c) {
            for x in chunk.iter_mut() {
                *x *= w;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(out, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.push(out, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x.max(0.0)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("shape");
        self.kink_inputs.push(a);
        self.push(out, Op::Relu(a))
    }

    /// Row-wise softmax. With `causal`, row `i` only covers columns `0..=i`
    /// and the masked entries are exactly zero.
    pub fn softmax(&mut self, x: NodeId, causal: bool) -> NodeId {
        let vx = self.value(x);
        let (m, n) = dims(vx);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let width = if causal { (i + 1).min(n) } else { n };
            let row = &vx.row(i)[..width];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..i * n + width];
            let mut sum = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        self.push(out, Op::Softmax { x, causal })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let vx = self.value(x);
        let (m, n) = dims(vx);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        assert_eq!(g.len(), n);
        assert_eq!(b.len(), n);
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                data[i * n + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data).expect("shape");
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Selects rows of `table` (embedding lookup).
    pub fn gather(&mut self, table: NodeId, rows: &[usize]) -> NodeId {
        let vt = self.value(table);
        let n = vt.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < vt.rows(), "gather row {r} out of range");
            data.extend_from_slice(vt.row(r));
        }
        let out = Tensor::matrix(rows.len(), n, data).expect("shape");
        self.push(out, Op::Gather { table, rows: rows.to_vec() })
    }

    /// `base` with `src[i]` added onto row `rows[i]`.
    pub fn index_add(&mut self, base: NodeId, src: NodeId, rows: &[usize]) -> NodeId {
        let vb = self.value(base);
        let vs = self.value(src);
        let n = vb.cols();
        assert_eq!(vs.cols(), n);
        assert_eq!(vs.rows(), rows.len());
        let mut data = vb.data().to_vec();
        for (i, &r) in rows.iter().enumerate() {
            for (o, s) in data[r * n..(r + 1) * n].iter_mut().zip(vs.row(i)) {
                *o += s;
            }
        }
        let out = Tensor::new(vb.shape().to_vec(), data).expect("shape");
        self.push(out, Op::IndexAdd { base, src, rows: rows.to_vec() })
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.cols(), n, "concat_rows width mismatch");
            m += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::matrix(m, n, data).expect("shape");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            assert_eq!(v.rows(), m, "concat_cols height mismatch");
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(v.row(i));
            }
            off += w;
        }
        let out = Tensor::matrix(m, n, data).expect("shape");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let vx = self.value(x);
        let (m, n) = dims(vx);
        assert!(start < end && end <= n, "slice_cols {start}..{end} of {n}");
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&vx.row(i)[start..end]);
        }
        let out = Tensor::matrix(m, w, data).expect("shape");
        self.push(out, Op::SliceCols { x, start })
    }

    /// Column means, returned as a `1 x n` row.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let (m, n) = dims(vx);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for (d, v) in data.iter_mut().zip(vx.row(i)) {
                *d += v;
            }
        }
        for d in data.iter_mut() {
            *d /= m as f64;
        }
        let out = Tensor::matrix(1, n, data).expect("shape");
        self.push(out, Op::MeanRows(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Mean of `-log softmax(logits[row])[class]` over the listed pairs.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> NodeId {
        assert!(!targets.is_empty(), "cross_entropy needs at least one target");
        let vl = self.value(logits);
        let n = vl.cols();
        let mut probs = Vec::with_capacity(targets.len() * n);
        let mut total = 0.0;
        for &(r, c) in targets {
            let row = vl.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[c];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let loss = total / targets.len() as f64;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
        )
    }

    /// Sparse gate: per row, softmax over the `k` largest logits (ties toward
    /// lower index), zero elsewhere.
    pub fn topk_softmax(&mut self, logits: NodeId, k: usize) -> NodeId {
        let vl = self.value(logits);
        let (m, n) = dims(vl);
        assert!(k >= 1 && k <= n, "k={k} out of range for {n} experts");
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let (sel, w) = topk_softmax_row(vl.row(i), k);
            for (&j, wj) in sel.iter().zip(w) {
                data[i * n + j] = wj;
            }
        }
        let out = Tensor::matrix(m, n, data).expect("shape");
        self.push(out, Op::TopKSoftmax { logits })
    }

    /// Values of every ReLU input recorded so far, flattened in record order.
    pub fn kink_inputs(&self) -> Vec<f64> {
        self.kink_inputs
            .iter()
            .flat_map(|id| self.value(*id).data().iter().copied())
            .collect()
    }

    pub fn check_finite(&self) -> Result<(), KernelError> {
        match self.nonfinite {
            Some((node, op)) => Err(KernelError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, KernelError> {
        if !self.value(loss).is_scalar() {
            return Err(KernelError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0]).expect("scalar"));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.all_finite() {
                return Err(KernelError::NonFinite { op: node.op.name(), node: idx });
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Vec<f64>) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => {
                for (a, d) in g.data_mut().iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.value(id).shape().to_vec(), delta).expect("grad shape"));
            }
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).cols();
                if self.requires_grad(*a) {
                    // dA = dC * B^T
                    let da = matmul_nt(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dC
                    let db = matmul_tn(self.value(*a).data(), gd, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).rows();
                if self.requires_grad(*a) {
                    // dA = dC * B
                    let da = matmul(gd, self.value(*b).data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = dC^T * A
                    let db = matmul_tn(gd, self.value(*a).data(), m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, gd.iter().zip(vb).map(|(g, y)| g * y).collect());
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, gd.iter().zip(va).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.requires_grad(*row) {
                    let n = g.cols();
                    let mut dr = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::MulCol(a, col) => {
                let n = g.cols();
                let c = self.value(*col).data();
                if self.requires_grad(*a) {
                    let mut da = gd.to_vec();
                    for (chunk, w) in da.chunks_mut(n).zip(c) {
                        for x in chunk.iter_mut() {
                            *x *= w;
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*col) {
                    let va = self.value(*a).data();
                    let dc = gd
                        .chunks(n)
                        .zip(va.chunks(n))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    self.accumulate(grads, *col, dc);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|v| v * c).collect());
            }
            Op::Gelu(a) => {
                let va = self.value(*a).data();
                self.accumulate(grads, *a, gd.iter().zip(va).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let d = gd.iter().zip(va).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax { x, causal } => {
                let (m, n) = dims(out);
                let y = out.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let width = if *causal { (i + 1).min(n) } else { n };
                    let yr = &y[i * n..i * n + width];
                    let gr = &gd[i * n..i * n + width];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..width {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let (m, n) = dims(out);
                let gm = self.value(*gamma).data();
                if self.requires_grad(*gamma) {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.requires_grad(*beta) {
                    let mut db = vec![0.0; n];
                    for chunk in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for i in 0..m {
                        let dh: Vec<f64> = (0..n).map(|j| gd[i * n + j] * gm[j]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = (0..n).map(|j| dh[j] * xhat[i * n + j]).sum();
                        for j in 0..n {
                            dx[i * n + j] =
                                inv_std[i] / nf * (nf * dh[j] - sum_dh - xhat[i * n + j] * sum_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gather { table, rows } => {
                let vt = self.value(*table);
                let n = vt.cols();
                let mut dt = vec![0.0; vt.len()];
                for (i, &r) in rows.iter().enumerate() {
                    for (d, v) in dt[r * n..(r + 1) * n].iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::IndexAdd { base, src, rows } => {
                self.accumulate(grads, *base, gd.to_vec());
                if self.requires_grad(*src) {
                    let n = g.cols();
                    let mut ds = Vec::with_capacity(rows.len() * n);
                    for &r in rows {
                        ds.extend_from_slice(&gd[r * n..(r + 1) * n]);
                    }
                    self.accumulate(grads, *src, ds);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, gd[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = dims(out);
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for i in 0..m {
                            dp.extend_from_slice(&gd[i * n + off..i * n + off + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = dims(self.value(*x));
                let w = out.cols();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + w].copy_from_slice(&gd[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let (m, n) = dims(self.value(*x));
                let mut dx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    dx.extend(gd.iter().map(|v| v / m as f64));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; len]);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0] / len as f64; len]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vl = self.value(*logits);
                let n = vl.cols();
                let scale = gd[0] / targets.len() as f64;
                let mut dl = vec![0.0; vl.len()];
                for (t, &(r, c)) in targets.iter().enumerate() {
                    let p = &probs[t * n..(t + 1) * n];
                    for j in 0..n {
                        dl[r * n + j] += scale * p[j];
                    }
                    dl[r * n + c] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::TopKSoftmax { logits } => {
                // softmax Jacobian restricted to the selected (nonzero) entries
                let (m, n) = dims(out);
                let y = out.data();
                let mut dl = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        if yr[j] != 0.0 {
                            dl[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                }
                self.accumulate(grads, *logits, dl);
            }
        }
    }
}
