//! Reverse-mode autodiff tape over rank-2 [`Tensor`]s.
//!
//! Ops compute eagerly, record themselves on the tape, and check their
//! output for non-finite values before it can reach anything downstream.
//! `backward` sweeps the tape once in reverse topological order (creation
//! order is topological by construction). Repeated `backward` calls
//! accumulate into the same gradient buffers until `zero_grads`.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// a * b^T without materializing the transpose.
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    /// Broadcast a `1 x m` row vector over every row of a.
    AddRowVec(NodeId, NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows {
        input: NodeId,
        scale: f64,
    },
    /// Per-column logsumexp over rows; saved softmax weights drive backward.
    LsePoolCols {
        input: NodeId,
        weights: Vec<f64>,
    },
    MaxPoolCols {
        input: NodeId,
        argmax: Vec<usize>,
    },
    MeanAll(NodeId),
    SumAll(NodeId),
    MeanOverRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Reshape(NodeId),
    GatherRows(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Wengert tape. One per forward pass; confined to a single thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

// ── raw matrix helpers (also used by backward) ──────────────────────────

fn mm_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a[n x k] * b[m x k]^T -> [n x m]
fn mm_nt(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * m + j] = s;
        }
    }
    out
}

/// a[n x k]^T * b[n x m] -> [k x m]
fn mm_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Accumulated gradient, if `backward` has reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Force gradient retention on an interior node (attention maps use
    /// this so attribution can read d f / d A even under a frozen backbone).
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].needs_grad = true;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<NodeId> {
        if !value.is_matrix() {
            return Err(Error::Dimension(format!(
                "graph tensors are rank <= 2, got shape {:?}",
                value.shape()
            )));
        }
        if !value.all_finite() {
            return Err(Error::Numeric(
                "op produced a non-finite value".to_string(),
            ));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Insert a tensor as a tape input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<NodeId> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Insert a tensor that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        self.leaf(value, false)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn needs2(&self, a: NodeId, b: NodeId) -> bool {
        self.needs(a) || self.needs(b)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, ctx: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::Dimension(format!(
                "{ctx}: shapes {:?} and {:?} differ",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        Ok(())
    }

    // ── binary elementwise ──────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs2(a, b);
        self.push(t, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs2(a, b);
        self.push(t, Op::Sub(a, b), needs)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs2(a, b);
        self.push(t, Op::Mul(a, b), needs)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "div")?;
        let data = self
            .val(a)
            .data()
            .iter()
            .zip(self.val(b).data())
            .map(|(&x, &y)| x / y)
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs2(a, b);
        self.push(t, Op::Div(a, b), needs)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Numeric(format!("scale by non-finite {c}")));
        }
        let data = self.val(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(t, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::Numeric(format!("add_scalar with non-finite {c}")));
        }
        let data = self.val(a).data().iter().map(|&x| x + c).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(t, Op::AddScalar(a), needs)
    }

    /// `a[n x m] + v[1 x m]`, v broadcast over rows.
    pub fn add_rowvec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, m) = (self.val(a).rows(), self.val(a).cols());
        if self.val(v).rows() != 1 || self.val(v).cols() != m {
            return Err(Error::Dimension(format!(
                "add_rowvec: vector shape {:?} does not broadcast over {:?}",
                self.val(v).shape(),
                self.val(a).shape()
            )));
        }
        let av = self.val(a).data();
        let vv = self.val(v).data();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                data.push(av[i * m + j] + vv[j]);
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let needs = self.needs2(a, v);
        self.push(t, Op::AddRowVec(a, v), needs)
    }

    // ── matrix products ─────────────────────────────────────────────────

    /// Standard product `a[n x k] * b[k x m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ka) = (self.val(a).rows(), self.val(a).cols());
        let (kb, m) = (self.val(b).rows(), self.val(b).cols());
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul: inner extents {ka} and {kb} disagree"
            )));
        }
        let data = mm_nn(self.val(a).data(), self.val(b).data(), n, ka, m);
        let t = Tensor::new(vec![n, m], data)?;
        let needs = self.needs2(a, b);
        self.push(t, Op::MatMul(a, b), needs)
    }

    /// `a[n x k] * b[m x k]^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ka) = (self.val(a).rows(), self.val(a).cols());
        let (m, kb) = (self.val(b).rows(), self.val(b).cols());
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul_nt: inner extents {ka} and {kb} disagree"
            )));
        }
        let data = mm_nt(self.val(a).data(), self.val(b).data(), n, ka, m);
        let t = Tensor::new(vec![n, m], data)?;
        let needs = self.needs2(a, b);
        self.push(t, Op::MatMulNt(a, b), needs)
    }

    // ── unary ───────────────────────────────────────────────────────────

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self
            .val(a)
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(t, Op::Sigmoid(a), needs)
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.val(a).data().iter().map(|&x| x.ln()).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(t, Op::Log(a), needs)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let data = self.val(a).data().iter().map(|&x| x.sqrt()).collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(t, Op::Sqrt(a), needs)
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::Parameter(format!("clamp: lo {lo} must be < hi {hi}")));
        }
        let data = self
            .val(a)
            .data()
            .iter()
            .map(|&x| x.clamp(lo, hi))
            .collect();
        let t = Tensor::new(self.val(a).shape().to_vec(), data)?;
        let needs = self.needs(a);
        self.push(t, Op::Clamp { input: a, lo, hi }, needs)
    }

    // ── softmax / pooling ───────────────────────────────────────────────

    /// Row-wise softmax of `scale * x`, stabilized by per-row max
    /// subtraction. Every output row is a probability vector.
    pub fn softmax_rows(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::Parameter(format!(
                "softmax_rows: scale must be positive and finite, got {scale}"
            )));
        }
        let (n, m) = (self.val(a).rows(), self.val(a).cols());
        let x = self.val(a).data();
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let mx = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            let mut sum = 0.0;
            for j in 0..m {
                let e = (scale * (row[j] - mx)).exp();
                data[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                data[i * m + j] /= sum;
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        let needs = self.needs(a);
        self.push(t, Op::SoftmaxRows { input: a, scale }, needs)
    }

    /// Per column j: `(1/lambda) * log sum_i exp(lambda * a[i, j])`,
    /// stabilized by per-column max subtraction. Output is `1 x m`.
    pub fn logsumexp_over_rows(&mut self, a: NodeId, lambda: f64) -> Result<NodeId> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Parameter(format!(
                "logsumexp_over_rows: lambda must be positive, got {lambda}"
            )));
        }
        let (n, m) = (self.val(a).rows(), self.val(a).cols());
        let x = self.val(a).data();
        let mut out = vec![0.0; m];
        let mut weights = vec![0.0; n * m];
        for j in 0..m {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..n {
                mx = mx.max(x[i * m + j]);
            }
            let mut sum = 0.0;
            for i in 0..n {
                let e = (lambda * (x[i * m + j] - mx)).exp();
                weights[i * m + j] = e;
                sum += e;
            }
            for i in 0..n {
                weights[i * m + j] /= sum;
            }
            out[j] = mx + sum.ln() / lambda;
        }
        let t = Tensor::new(vec![1, m], out)?;
        let needs = self.needs(a);
        self.push(t, Op::LsePoolCols { input: a, weights }, needs)
    }

    /// Per-column maximum over rows; ties resolve to the lowest row index.
    pub fn max_over_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = (self.val(a).rows(), self.val(a).cols());
        let x = self.val(a).data();
        let mut out = vec![f64::NEG_INFINITY; m];
        let mut argmax = vec![0usize; m];
        for j in 0..m {
            for i in 0..n {
                let v = x[i * m + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let t = Tensor::new(vec![1, m], out)?;
        let needs = self.needs(a);
        self.push(t, Op::MaxPoolCols { input: a, argmax }, needs)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let numel = self.val(a).numel() as f64;
        let s: f64 = self.val(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s / numel), Op::MeanAll(a), needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let s: f64 = self.val(a).data().iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), needs)
    }

    /// Column means: `[n x m] -> [1 x m]`.
    pub fn mean_over_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (n, m) = (self.val(a).rows(), self.val(a).cols());
        let x = self.val(a).data();
        let mut out = vec![0.0; m];
        for i in 0..n {
            for j in 0..m {
                out[j] += x[i * m + j];
            }
        }
        for v in &mut out {
            *v /= n as f64;
        }
        let needs = self.needs(a);
        self.push(Tensor::new(vec![1, m], out)?, Op::MeanOverRows(a), needs)
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".to_string()));
        }
        let n = self.val(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.val(p).rows() != n {
                return Err(Error::Dimension(
                    "concat_cols: row counts differ".to_string(),
                ));
            }
            widths.push(self.val(p).cols());
        }
        let m: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                let row = &self.val(p).data()[i * w..(i + 1) * w];
                data.extend_from_slice(row);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(vec![n, m], data)?,
            Op::ConcatCols(parts.to_vec()),
            needs,
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero tensors".to_string()));
        }
        let m = self.val(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            if self.val(p).cols() != m {
                return Err(Error::Dimension(
                    "concat_rows: column counts differ".to_string(),
                ));
            }
            n += self.val(p).rows();
            data.extend_from_slice(self.val(p).data());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(vec![n, m], data)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        )
    }

    /// Contiguous row band `lo..hi`.
    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (n, m) = (self.val(a).rows(), self.val(a).cols());
        if lo >= hi || hi > n {
            return Err(Error::Dimension(format!(
                "slice_rows: range {lo}..{hi} invalid for {n} rows"
            )));
        }
        let data = self.val(a).data()[lo * m..hi * m].to_vec();
        let needs = self.needs(a);
        self.push(
            Tensor::new(vec![hi - lo, m], data)?,
            Op::SliceRows(a, lo, hi),
            needs,
        )
    }

    /// Contiguous column band `lo..hi`.
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> Result<NodeId> {
        let (n, m) = (self.val(a).rows(), self.val(a).cols());
        if lo >= hi || hi > m {
            return Err(Error::Dimension(format!(
                "slice_cols: range {lo}..{hi} invalid for {m} cols"
            )));
        }
        let x = self.val(a).data();
        let w = hi - lo;
        let mut data = Vec::with_capacity(n * w);
        for i in 0..n {
            data.extend_from_slice(&x[i * m + lo..i * m + hi]);
        }
        let needs = self.needs(a);
        self.push(
            Tensor::new(vec![n, w], data)?,
            Op::SliceCols(a, lo, hi),
            needs,
        )
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.val(a).numel() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.val(a).shape(),
                shape
            )));
        }
        let t = Tensor::new(shape.to_vec(), self.val(a).data().to_vec())?;
        let needs = self.needs(a);
        self.push(t, Op::Reshape(a), needs)
    }

    /// Row lookup: out[r, :] = table[ids[r], :]. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (n, m) = (self.val(table).rows(), self.val(table).cols());
        if ids.is_empty() {
            return Err(Error::Usage("gather_rows with no indices".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather_rows: row {bad} out of range for {n} rows"
            )));
        }
        let x = self.val(table).data();
        let mut data = Vec::with_capacity(ids.len() * m);
        for &i in ids {
            data.extend_from_slice(&x[i * m..(i + 1) * m]);
        }
        let needs = self.needs(table);
        self.push(
            Tensor::new(vec![ids.len(), m], data)?,
            Op::GatherRows(table, ids.to_vec()),
            needs,
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients land on every node with
    /// `needs_grad` that the loss reaches; calls accumulate until
    /// [`Graph::zero_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.val(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        // Local output-gradient buffers: grads of this sweep only, so that
        // earlier accumulated grads do not leak into the propagation.
        let mut sweep: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        sweep[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = sweep[i].take() else {
                continue;
            };
            if self.nodes[i].needs_grad {
                match &mut self.grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(gout.data()) {
                            *a += b;
                        }
                    }
                    None => self.grads[i] = Some(gout.clone()),
                }
            }
            for (j, contrib) in self.input_grads(i, &gout) {
                if !self.nodes[j].needs_grad {
                    continue;
                }
                match &mut sweep[j] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a += b;
                        }
                    }
                    None => sweep[j] = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products for node `i` given its output gradient.
    fn input_grads(&self, i: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[i];
        let mut out: Vec<(usize, Tensor)> = Vec::new();
        let mut emit = |id: NodeId, shape: Vec<usize>, data: Vec<f64>| {
            out.push((id.0, Tensor::new(shape, data).expect("grad shape")));
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = (self.val(*a).rows(), self.val(*a).cols());
                let m = self.val(*b).cols();
                let ga = mm_nt(g.data(), self.val(*b).data(), n, m, k);
                let gb = mm_tn(self.val(*a).data(), g.data(), n, k, m);
                emit(*a, vec![n, k], ga);
                emit(*b, vec![k, m], gb);
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = (self.val(*a).rows(), self.val(*a).cols());
                let m = self.val(*b).rows();
                let ga = mm_nn(g.data(), self.val(*b).data(), n, m, k);
                let gb = mm_tn(g.data(), self.val(*a).data(), n, m, k);
                emit(*a, vec![n, k], ga);
                emit(*b, vec![m, k], gb);
            }
            Op::Add(a, b) => {
                emit(*a, g.shape().to_vec(), g.data().to_vec());
                emit(*b, g.shape().to_vec(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                emit(*a, g.shape().to_vec(), g.data().to_vec());
                emit(*b, g.shape().to_vec(), g.data().iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(self.val(*b).data())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let gb = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                emit(*a, g.shape().to_vec(), ga);
                emit(*b, g.shape().to_vec(), gb);
            }
            Op::Div(a, b) => {
                let ga = g
                    .data()
                    .iter()
                    .zip(self.val(*b).data())
                    .map(|(&gv, &bv)| gv / bv)
                    .collect();
                let gb = g
                    .data()
                    .iter()
                    .zip(node.value.data().iter().zip(self.val(*b).data()))
                    .map(|(&gv, (&cv, &bv))| -gv * cv / bv)
                    .collect();
                emit(*a, g.shape().to_vec(), ga);
                emit(*b, g.shape().to_vec(), gb);
            }
            Op::Scale(a, c) => {
                emit(*a, g.shape().to_vec(), g.data().iter().map(|v| v * c).collect());
            }
            Op::AddScalar(a) => {
                emit(*a, g.shape().to_vec(), g.data().to_vec());
            }
            Op::AddRowVec(a, v) => {
                let (n, m) = (self.val(*a).rows(), self.val(*a).cols());
                emit(*a, vec![n, m], g.data().to_vec());
                let mut gv = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        gv[j] += g.data()[i * m + j];
                    }
                }
                emit(*v, vec![1, m], gv);
            }
            Op::Sigmoid(a) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect();
                emit(*a, g.shape().to_vec(), gx);
            }
            Op::Log(a) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                emit(*a, g.shape().to_vec(), gx);
            }
            Op::Sqrt(a) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv / (2.0 * y))
                    .collect();
                emit(*a, g.shape().to_vec(), gx);
            }
            Op::Clamp { input, lo, hi } => {
                let gx = g
                    .data()
                    .iter()
                    .zip(self.val(*input).data())
                    .map(|(&gv, &x)| if x > *lo && x < *hi { gv } else { 0.0 })
                    .collect();
                emit(*input, g.shape().to_vec(), gx);
            }
            Op::SoftmaxRows { input, scale } => {
                let y = node.value.data();
                let (n, m) = (node.value.rows(), node.value.cols());
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += g.data()[i * m + j] * y[i * m + j];
                    }
                    for j in 0..m {
                        gx[i * m + j] = scale * y[i * m + j] * (g.data()[i * m + j] - dot);
                    }
                }
                emit(*input, vec![n, m], gx);
            }
            Op::LsePoolCols { input, weights } => {
                let (n, m) = (self.val(*input).rows(), self.val(*input).cols());
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] = g.data()[j] * weights[i * m + j];
                    }
                }
                emit(*input, vec![n, m], gx);
            }
            Op::MaxPoolCols { input, argmax } => {
                let (n, m) = (self.val(*input).rows(), self.val(*input).cols());
                let mut gx = vec![0.0; n * m];
                for (j, &i) in argmax.iter().enumerate() {
                    gx[i * m + j] = g.data()[j];
                }
                emit(*input, vec![n, m], gx);
            }
            Op::MeanAll(a) => {
                let numel = self.val(*a).numel();
                let gv = g.data()[0] / numel as f64;
                emit(*a, self.val(*a).shape().to_vec(), vec![gv; numel]);
            }
            Op::SumAll(a) => {
                let numel = self.val(*a).numel();
                emit(*a, self.val(*a).shape().to_vec(), vec![g.data()[0]; numel]);
            }
            Op::MeanOverRows(a) => {
                let (n, m) = (self.val(*a).rows(), self.val(*a).cols());
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] = g.data()[j] / n as f64;
                    }
                }
                emit(*a, vec![n, m], gx);
            }
            Op::ConcatCols(parts) => {
                let n = node.value.rows();
                let m = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    let mut gp = Vec::with_capacity(n * w);
                    for i in 0..n {
                        gp.extend_from_slice(&g.data()[i * m + off..i * m + off + w]);
                    }
                    emit(p, vec![n, w], gp);
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let m = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.val(p).rows();
                    let gp = g.data()[off * m..(off + r) * m].to_vec();
                    emit(p, vec![r, m], gp);
                    off += r;
                }
            }
            Op::SliceRows(a, lo, _hi) => {
                let (n, m) = (self.val(*a).rows(), self.val(*a).cols());
                let mut gx = vec![0.0; n * m];
                gx[lo * m..lo * m + g.data().len()].copy_from_slice(g.data());
                emit(*a, vec![n, m], gx);
            }
            Op::SliceCols(a, lo, hi) => {
                let (n, m) = (self.val(*a).rows(), self.val(*a).cols());
                let w = hi - lo;
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    gx[i * m + lo..i * m + hi].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                emit(*a, vec![n, m], gx);
            }
            Op::Reshape(a) => {
                emit(*a, self.val(*a).shape().to_vec(), g.data().to_vec());
            }
            Op::GatherRows(table, ids) => {
                let (n, m) = (self.val(*table).rows(), self.val(*table).cols());
                let mut gx = vec![0.0; n * m];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..m {
                        gx[i * m + j] += g.data()[r * m + j];
                    }
                }
                emit(*table, vec![n, m], gx);
            }
        }
        out
    }
}
