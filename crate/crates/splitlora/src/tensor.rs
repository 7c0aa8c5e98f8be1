//! Dense `f64` tensors and reverse-mode automatic differentiation.
//!
//! The differentiation engine is a flat arena tape: every produced value
//! occupies one slot, ops record the slot indices of their inputs, and slot
//! order is already a topological order. `backward` walks the slots once in
//! reverse. All arithmetic is `f64` with fixed summation order, so identical
//! inputs give bit-identical outputs on every run.
//!
//! Frozen leaves (`requires_grad = false`) never get gradient buffers, and a
//! node whose inputs are all frozen is skipped entirely during the backward
//! sweep. That keeps the cost of differentiating a model with large frozen
//! weight matrices proportional to the small trainable part.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor. Rank 0 (empty shape) is a scalar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data.len()` matches the shape volume.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::InvalidArgument(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// Samples i.i.d. `N(0, std^2)` entries in index order from `rng`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// First dimension of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Second dimension of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    /// Scalar payload. Panics if the tensor is not rank 0.
    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "scalar_value on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise absolute difference; infinite if shapes differ.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        if self.shape != other.shape {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Handle to one slot on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One primitive differentiable operation. Input fields reference earlier
/// tape slots; integer payloads (token ids, labels) are constants.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul { a: ValueId, b: ValueId },
    /// `[m,k] x [n,k]^T -> [m,n]`
    MatMulTransposeB { a: ValueId, b: ValueId },
    /// Elementwise sum of identically shaped tensors.
    Add { a: ValueId, b: ValueId },
    /// `[n,c]` plus a length-`c` bias added to every row.
    AddRowBias { a: ValueId, bias: ValueId },
    Scale { a: ValueId, factor: f64 },
    /// Row-wise normalization of `[n,h]` with per-feature gain and shift.
    LayerNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    },
    /// tanh-approximation GELU, elementwise.
    Gelu { x: ValueId },
    /// Row-wise softmax of `[n,c]`.
    SoftmaxRows { x: ValueId },
    /// Mean over rows of softmax cross-entropy; produces a scalar.
    SoftmaxCrossEntropy { logits: ValueId, labels: Vec<usize> },
    /// Gathers `ids` rows from a `[v,h]` table into `[len,h]`.
    EmbedLookup { table: ValueId, ids: Vec<usize> },
    /// `[g*s,h] -> [g,h]`, mean over each consecutive group of `s` rows.
    MeanPoolRows { x: ValueId, group_size: usize },
    /// Scaled dot-product attention over `heads` slices of `[batch*seq, h]`.
    MultiHeadAttention {
        q: ValueId,
        k: ValueId,
        v: ValueId,
        batch: usize,
        heads: usize,
    },
    /// Sum of all elements; produces a scalar.
    SumAll { x: ValueId },
}

struct Node {
    op: Op,
    /// For leaves: whether a gradient buffer is kept. For interior nodes:
    /// whether any input transitively requires a gradient.
    needs_grad: bool,
}

/// Gradients for the trainable leaves of one tape, produced by a backward
/// sweep. Interior slots and frozen leaves hold no buffer.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the swept scalar w.r.t. a trainable leaf. Returns zeros
    /// if no gradient flowed to the leaf, `None` if the slot is not a
    /// trainable leaf.
    pub fn get(&self, id: ValueId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

/// Arena recording every forward value and the op that produced it.
#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of slots (leaves plus op outputs).
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.values[id.0]
    }

    /// Registers an input tensor. Trainable leaves are the only slots that
    /// receive gradient buffers from a backward sweep.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValueId {
        self.push(Op::Leaf, requires_grad, value)
    }

    fn push(&mut self, op: Op, needs_grad: bool, value: Tensor) -> ValueId {
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, needs_grad });
        self.values.push(value);
        id
    }

    fn check(&self, id: ValueId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Contract(format!(
                "value id {} does not belong to this tape (len {})",
                id.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn record(&mut self, op: Op, inputs: &[ValueId]) -> Result<ValueId> {
        for &i in inputs {
            self.check(i)?;
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        let value = eval_op(&self.values, &op)?;
        Ok(self.push(op, needs, value))
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::MatMul { a, b }, &[a, b])
    }

    /// `a x b^T`; lets `[n,k]`-stored factors multiply on the right without
    /// materializing a transpose.
    pub fn matmul_transpose_b(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::MatMulTransposeB { a, b }, &[a, b])
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.record(Op::Add { a, b }, &[a, b])
    }

    pub fn add_row_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        self.record(Op::AddRowBias { a, bias }, &[a, bias])
    }

    pub fn scale(&mut self, a: ValueId, factor: f64) -> Result<ValueId> {
        self.record(Op::Scale { a, factor }, &[a])
    }

    pub fn layer_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<ValueId> {
        self.record(Op::LayerNorm { x, gamma, beta, eps }, &[x, gamma, beta])
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::Gelu { x }, &[x])
    }

    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::SoftmaxRows { x }, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: ValueId, labels: &[usize]) -> Result<ValueId> {
        self.record(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    pub fn embed_lookup(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        self.record(
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn mean_pool_rows(&mut self, x: ValueId, group_size: usize) -> Result<ValueId> {
        self.record(Op::MeanPoolRows { x, group_size }, &[x])
    }

    pub fn multi_head_attention(
        &mut self,
        q: ValueId,
        k: ValueId,
        v: ValueId,
        batch: usize,
        heads: usize,
    ) -> Result<ValueId> {
        self.record(
            Op::MultiHeadAttention { q, k, v, batch, heads },
            &[q, k, v],
        )
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        self.record(Op::SumAll { x }, &[x])
    }

    /// Reverse sweep from a scalar loss, seeding its adjoint with 1.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        self.check(loss)?;
        let t = &self.values[loss.0];
        if !t.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.sweep(loss, vec![1.0])
    }

    /// Reverse sweep from an arbitrary value with a caller-supplied adjoint.
    /// This is how a gradient received for a boundary activation is chained
    /// into the producing tape.
    pub fn backward_from(&self, value: ValueId, seed: &Tensor) -> Result<Gradients> {
        self.check(value)?;
        let t = &self.values[value.0];
        if t.shape() != seed.shape() {
            return Err(Error::DimensionMismatch {
                op: "backward_from",
                lhs: t.shape().to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        self.sweep(value, seed.data().to_vec())
    }

    fn sweep(&self, root: ValueId, seed: Vec<f64>) -> Result<Gradients> {
        let n = self.nodes.len();
        let mut adjoints: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.needs(root) {
            adjoints[root.0] = Some(seed);
        }

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(grad_out) = adjoints[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                adjoints[i] = Some(grad_out);
                continue;
            }
            self.apply_vjp(i, &grad_out, &mut adjoints);
        }

        let grads = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if matches!(node.op, Op::Leaf) && node.needs_grad {
                    let data = adjoints[i]
                        .take()
                        .unwrap_or_else(|| vec![0.0; self.values[i].numel()]);
                    Some(Tensor {
                        shape: self.values[i].shape().to_vec(),
                        data,
                    })
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Accumulates `grad_out . d(out_i)/d(input)` into each input's adjoint.
    fn apply_vjp(&self, i: usize, grad_out: &[f64], adjoints: &mut [Option<Vec<f64>>]) {
        let val = |id: ValueId| &self.values[id.0];
        let mut add_into = |id: ValueId, contrib: Vec<f64>| {
            if !self.needs(id) {
                return;
            }
            match &mut adjoints[id.0] {
                Some(buf) => {
                    for (d, s) in buf.iter_mut().zip(&contrib) {
                        *d += s;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => unreachable!("leaves have no inputs"),
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    add_into(*a, mm_bt(grad_out, tb.data(), m, n, k));
                }
                if self.needs(*b) {
                    add_into(*b, mm_at(ta.data(), grad_out, m, k, n));
                }
            }
            Op::MatMulTransposeB { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.needs(*a) {
                    add_into(*a, mm(grad_out, tb.data(), m, n, k));
                }
                if self.needs(*b) {
                    add_into(*b, mm_at(grad_out, ta.data(), m, n, k));
                }
            }
            Op::Add { a, b } => {
                add_into(*a, grad_out.to_vec());
                add_into(*b, grad_out.to_vec());
            }
            Op::AddRowBias { a, bias } => {
                add_into(*a, grad_out.to_vec());
                if self.needs(*bias) {
                    let c = val(*bias).numel();
                    let mut db = vec![0.0; c];
                    for row in grad_out.chunks_exact(c) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    add_into(*bias, db);
                }
            }
            Op::Scale { a, factor } => {
                add_into(*a, grad_out.iter().map(|g| g * factor).collect());
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (tx, tg) = (val(*x), val(*gamma));
                let h = tg.numel();
                let rows = tx.numel() / h;
                let mut dx = vec![0.0; tx.numel()];
                let mut dgamma = vec![0.0; h];
                let mut dbeta = vec![0.0; h];
                for r in 0..rows {
                    let xs = &tx.data()[r * h..(r + 1) * h];
                    let gs = &grad_out[r * h..(r + 1) * h];
                    let mean = xs.iter().sum::<f64>() / h as f64;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..h {
                        let xhat = (xs[j] - mean) * inv;
                        let t = tg.data()[j] * gs[j];
                        dgamma[j] += gs[j] * xhat;
                        dbeta[j] += gs[j];
                        m1 += t;
                        m2 += t * xhat;
                    }
                    m1 /= h as f64;
                    m2 /= h as f64;
                    for j in 0..h {
                        let xhat = (xs[j] - mean) * inv;
                        let t = tg.data()[j] * gs[j];
                        dx[r * h + j] = (t - m1 - xhat * m2) * inv;
                    }
                }
                add_into(*x, dx);
                add_into(*gamma, dgamma);
                add_into(*beta, dbeta);
            }
            Op::Gelu { x } => {
                let tx = val(*x);
                let dx = tx
                    .data()
                    .iter()
                    .zip(grad_out)
                    .map(|(&v, g)| g * gelu_derivative(v))
                    .collect();
                add_into(*x, dx);
            }
            Op::SoftmaxRows { x } => {
                let tx = val(*x);
                let c = tx.cols();
                let probs = &self.values[i];
                let mut dx = vec![0.0; tx.numel()];
                for r in 0..tx.rows() {
                    let p = &probs.data()[r * c..(r + 1) * c];
                    let g = &grad_out[r * c..(r + 1) * c];
                    let dot: f64 = p.iter().zip(g).map(|(pi, gi)| pi * gi).sum();
                    for j in 0..c {
                        dx[r * c + j] = p[j] * (g[j] - dot);
                    }
                }
                add_into(*x, dx);
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let tl = val(*logits);
                let c = tl.cols();
                let n = tl.rows();
                let g = grad_out[0] / n as f64;
                let mut dx = vec![0.0; tl.numel()];
                for r in 0..n {
                    let row = &tl.data()[r * c..(r + 1) * c];
                    let p = softmax_row(row);
                    for j in 0..c {
                        let indicator = if j == labels[r] { 1.0 } else { 0.0 };
                        dx[r * c + j] = (p[j] - indicator) * g;
                    }
                }
                add_into(*logits, dx);
            }
            Op::EmbedLookup { table, ids } => {
                if self.needs(*table) {
                    let tt = val(*table);
                    let h = tt.cols();
                    let mut dt = vec![0.0; tt.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            dt[id * h + j] += grad_out[r * h + j];
                        }
                    }
                    add_into(*table, dt);
                }
            }
            Op::MeanPoolRows { x, group_size } => {
                let tx = val(*x);
                let h = tx.cols();
                let inv = 1.0 / *group_size as f64;
                let mut dx = vec![0.0; tx.numel()];
                for r in 0..tx.rows() {
                    let g = r / group_size;
                    for j in 0..h {
                        dx[r * h + j] = grad_out[g * h + j] * inv;
                    }
                }
                add_into(*x, dx);
            }
            Op::MultiHeadAttention { q, k, v, batch, heads } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let h = tq.cols();
                let seq = tq.rows() / batch;
                let dh = h / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; tq.numel()];
                let mut dk = vec![0.0; tk.numel()];
                let mut dv = vec![0.0; tv.numel()];
                let mut probs = vec![0.0; seq * seq];
                let mut dp = vec![0.0; seq * seq];
                let mut ds = vec![0.0; seq * seq];
                for b in 0..*batch {
                    for hd in 0..*heads {
                        let off = |row: usize| (b * seq + row) * h + hd * dh;
                        attention_probs(tq.data(), tk.data(), seq, dh, scale, &off, &mut probs);
                        // dP = dO . V^T, dV += P^T . dO
                        for i2 in 0..seq {
                            for j in 0..seq {
                                let mut acc = 0.0;
                                for d in 0..dh {
                                    acc += grad_out[off(i2) + d] * tv.data()[off(j) + d];
                                }
                                dp[i2 * seq + j] = acc;
                            }
                        }
                        for j in 0..seq {
                            for d in 0..dh {
                                let mut acc = 0.0;
                                for i2 in 0..seq {
                                    acc += probs[i2 * seq + j] * grad_out[off(i2) + d];
                                }
                                dv[off(j) + d] += acc;
                            }
                        }
                        // dS via the row-softmax VJP, then dQ, dK.
                        for i2 in 0..seq {
                            let p = &probs[i2 * seq..(i2 + 1) * seq];
                            let gp = &dp[i2 * seq..(i2 + 1) * seq];
                            let dot: f64 = p.iter().zip(gp).map(|(pi, gi)| pi * gi).sum();
                            for j in 0..seq {
                                ds[i2 * seq + j] = p[j] * (gp[j] - dot);
                            }
                        }
                        for i2 in 0..seq {
                            for d in 0..dh {
                                let mut acc = 0.0;
                                for j in 0..seq {
                                    acc += ds[i2 * seq + j] * tk.data()[off(j) + d];
                                }
                                dq[off(i2) + d] += acc * scale;
                            }
                        }
                        for j in 0..seq {
                            for d in 0..dh {
                                let mut acc = 0.0;
                                for i2 in 0..seq {
                                    acc += ds[i2 * seq + j] * tq.data()[off(i2) + d];
                                }
                                dk[off(j) + d] += acc * scale;
                            }
                        }
                    }
                }
                add_into(*q, dq);
                add_into(*k, dk);
                add_into(*v, dv);
            }
            Op::SumAll { x } => {
                let n = val(*x).numel();
                add_into(*x, vec![grad_out[0]; n]);
            }
        }
    }

    /// Recomputes every slot from the leaves with the same kernels the
    /// forward pass used. The result is bit-identical to the stored values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Leaf => self.values[i].clone(),
                op => eval_op(&values, op)?,
            };
            values.push(v);
        }
        Ok(values)
    }
}

/// Computes the output tensor for `op`, validating input shapes. Shared by
/// the recording path and `replay`.
fn eval_op(values: &[Tensor], op: &Op) -> Result<Tensor> {
    let val = |id: &ValueId| &values[id.0];
    match op {
        Op::Leaf => Err(Error::Contract("cannot evaluate a leaf".into())),
        Op::MatMul { a, b } => {
            let (ta, tb) = (val(a), val(b));
            require_rank2("matmul", ta)?;
            require_rank2("matmul", tb)?;
            if ta.cols() != tb.rows() {
                return Err(mismatch("matmul", ta, tb));
            }
            let out = mm(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.cols());
            Tensor::new(vec![ta.rows(), tb.cols()], out)
        }
        Op::MatMulTransposeB { a, b } => {
            let (ta, tb) = (val(a), val(b));
            require_rank2("matmul_transpose_b", ta)?;
            require_rank2("matmul_transpose_b", tb)?;
            if ta.cols() != tb.cols() {
                return Err(mismatch("matmul_transpose_b", ta, tb));
            }
            let out = mm_bt(ta.data(), tb.data(), ta.rows(), ta.cols(), tb.rows());
            Tensor::new(vec![ta.rows(), tb.rows()], out)
        }
        Op::Add { a, b } => {
            let (ta, tb) = (val(a), val(b));
            if ta.shape() != tb.shape() {
                return Err(mismatch("add", ta, tb));
            }
            let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            Tensor::new(ta.shape().to_vec(), out)
        }
        Op::AddRowBias { a, bias } => {
            let (ta, tb) = (val(a), val(bias));
            require_rank2("add_row_bias", ta)?;
            if tb.rank() != 1 || ta.cols() != tb.numel() {
                return Err(mismatch("add_row_bias", ta, tb));
            }
            let c = ta.cols();
            let mut out = ta.data().to_vec();
            for row in out.chunks_exact_mut(c) {
                for (x, b) in row.iter_mut().zip(tb.data()) {
                    *x += b;
                }
            }
            Tensor::new(ta.shape().to_vec(), out)
        }
        Op::Scale { a, factor } => {
            let ta = val(a);
            let out = ta.data().iter().map(|x| x * factor).collect();
            Tensor::new(ta.shape().to_vec(), out)
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let (tx, tg, tb) = (val(x), val(gamma), val(beta));
            require_rank2("layer_norm", tx)?;
            if tg.rank() != 1 || tg.numel() != tx.cols() {
                return Err(mismatch("layer_norm", tx, tg));
            }
            if tb.shape() != tg.shape() {
                return Err(mismatch("layer_norm", tg, tb));
            }
            let h = tx.cols();
            let mut out = vec![0.0; tx.numel()];
            for r in 0..tx.rows() {
                let xs = &tx.data()[r * h..(r + 1) * h];
                let mean = xs.iter().sum::<f64>() / h as f64;
                let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..h {
                    out[r * h + j] = (xs[j] - mean) * inv * tg.data()[j] + tb.data()[j];
                }
            }
            Tensor::new(tx.shape().to_vec(), out)
        }
        Op::Gelu { x } => {
            let tx = val(x);
            let out = tx.data().iter().map(|&v| gelu(v)).collect();
            Tensor::new(tx.shape().to_vec(), out)
        }
        Op::SoftmaxRows { x } => {
            let tx = val(x);
            require_rank2("softmax_rows", tx)?;
            let c = tx.cols();
            let mut out = vec![0.0; tx.numel()];
            for r in 0..tx.rows() {
                let p = softmax_row(&tx.data()[r * c..(r + 1) * c]);
                out[r * c..(r + 1) * c].copy_from_slice(&p);
            }
            Tensor::new(tx.shape().to_vec(), out)
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let tl = val(logits);
            require_rank2("softmax_cross_entropy", tl)?;
            let (n, c) = (tl.rows(), tl.cols());
            if labels.len() != n {
                return Err(Error::DimensionMismatch {
                    op: "softmax_cross_entropy",
                    lhs: tl.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                if label >= c {
                    return Err(Error::InvalidArgument(format!(
                        "label {label} out of range for {c} classes"
                    )));
                }
                let row = &tl.data()[r * c..(r + 1) * c];
                total += -log_softmax_at(row, label);
            }
            Ok(Tensor::scalar(total / n as f64))
        }
        Op::EmbedLookup { table, ids } => {
            let tt = val(table);
            require_rank2("embed_lookup", tt)?;
            let (v, h) = (tt.rows(), tt.cols());
            let mut out = vec![0.0; ids.len() * h];
            for (r, &id) in ids.iter().enumerate() {
                if id >= v {
                    return Err(Error::InvalidArgument(format!(
                        "token id {id} out of range for table with {v} rows"
                    )));
                }
                out[r * h..(r + 1) * h].copy_from_slice(&tt.data()[id * h..(id + 1) * h]);
            }
            Tensor::new(vec![ids.len(), h], out)
        }
        Op::MeanPoolRows { x, group_size } => {
            let tx = val(x);
            require_rank2("mean_pool_rows", tx)?;
            if *group_size == 0 || tx.rows() % group_size != 0 {
                return Err(Error::InvalidArgument(format!(
                    "mean_pool_rows: {} rows not divisible into groups of {}",
                    tx.rows(),
                    group_size
                )));
            }
            let (h, groups) = (tx.cols(), tx.rows() / group_size);
            let inv = 1.0 / *group_size as f64;
            let mut out = vec![0.0; groups * h];
            for r in 0..tx.rows() {
                let g = r / group_size;
                for j in 0..h {
                    out[g * h + j] += tx.data()[r * h + j] * inv;
                }
            }
            Tensor::new(vec![groups, h], out)
        }
        Op::MultiHeadAttention { q, k, v, batch, heads } => {
            let (tq, tk, tv) = (val(q), val(k), val(v));
            require_rank2("multi_head_attention", tq)?;
            if tq.shape() != tk.shape() {
                return Err(mismatch("multi_head_attention", tq, tk));
            }
            if tq.shape() != tv.shape() {
                return Err(mismatch("multi_head_attention", tq, tv));
            }
            let h = tq.cols();
            if *batch == 0 || tq.rows() % batch != 0 || *heads == 0 || h % heads != 0 {
                return Err(Error::InvalidArgument(format!(
                    "multi_head_attention: shape {:?} incompatible with batch {} and {} heads",
                    tq.shape(),
                    batch,
                    heads
                )));
            }
            let seq = tq.rows() / batch;
            let dh = h / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut out = vec![0.0; tq.numel()];
            let mut probs = vec![0.0; seq * seq];
            for b in 0..*batch {
                for hd in 0..*heads {
                    let off = |row: usize| (b * seq + row) * h + hd * dh;
                    attention_probs(tq.data(), tk.data(), seq, dh, scale, &off, &mut probs);
                    for i in 0..seq {
                        for d in 0..dh {
                            let mut acc = 0.0;
                            for j in 0..seq {
                                acc += probs[i * seq + j] * tv.data()[off(j) + d];
                            }
                            out[off(i) + d] = acc;
                        }
                    }
                }
            }
            Tensor::new(tq.shape().to_vec(), out)
        }
        Op::SumAll { x } => Ok(Tensor::scalar(val(x).data().iter().sum())),
    }
}

fn require_rank2(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::DimensionMismatch {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::DimensionMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// `[m,k] x [k,n]`, row-major, accumulation over `p` in index order.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `[m,k] x [n,k]^T -> [m,n]`.
fn mm_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `[k,m]^T x [k,n] -> [m,n]`; here `a` is `[k,m]` and `b` is `[k,n]`.
fn mm_at(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

/// Scores-and-softmax for one `(batch, head)` slice; `off` maps a sequence
/// row to its flat offset. Writes `seq*seq` probabilities into `probs`.
fn attention_probs(
    q: &[f64],
    k: &[f64],
    seq: usize,
    dh: usize,
    scale: f64,
    off: &dyn Fn(usize) -> usize,
    probs: &mut [f64],
) {
    for i in 0..seq {
        for j in 0..seq {
            let mut acc = 0.0;
            for d in 0..dh {
                acc += q[off(i) + d] * k[off(j) + d];
            }
            probs[i * seq + j] = acc * scale;
        }
    }
    for i in 0..seq {
        let p = softmax_row(&probs[i * seq..(i + 1) * seq]);
        probs[i * seq..(i + 1) * seq].copy_from_slice(&p);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Relative error metric used by every gradient check in this crate.
    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()))
    }

    /// Central finite-difference check of `build` against the tape's
    /// backward sweep. `build` must construct the graph from trainable
    /// leaves pushed in order and return the scalar loss id. Returns the
    /// number of coordinates checked.
    pub(crate) fn fd_check(
        build: &dyn Fn(&mut Tape, &[ValueId]) -> ValueId,
        inits: &[Tensor],
        tol: f64,
    ) -> usize {
        let eval = |params: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = params
                .iter()
                .map(|t| tape.leaf(t.clone(), true))
                .collect();
            let loss = build(&mut tape, &ids);
            tape.value(loss).scalar_value()
        };

        let mut tape = Tape::new();
        let ids: Vec<ValueId> = inits.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).expect("backward");

        let h = 1e-5;
        let mut checked = 0;
        for (pi, id) in ids.iter().enumerate() {
            let g = grads.get(*id).expect("trainable leaf grad");
            for c in 0..inits[pi].numel() {
                let mut plus = inits.to_vec();
                plus[pi].data_mut()[c] += h;
                let mut minus = inits.to_vec();
                minus[pi].data_mut()[c] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let analytic = g.data()[c];
                let err = rel_err(analytic, numeric);
                assert!(
                    err < tol,
                    "param {pi} coord {c}: analytic {analytic} vs numeric {numeric} (rel err {err})"
                );
                checked += 1;
            }
        }
        checked
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut tape = Tape::new();
        let a = tape.leaf(
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            false,
        );
        let b = tape.leaf(
            Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap(),
            false,
        );
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transpose_b_agrees_with_explicit_transpose() {
        let mut r = rng(1);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[5, 4], 1.0, &mut r);
        let mut bt_data = vec![0.0; 20];
        for i in 0..5 {
            for j in 0..4 {
                bt_data[j * 5 + i] = b.data()[i * 4 + j];
            }
        }
        let bt = Tensor::new(vec![4, 5], bt_data).unwrap();

        let mut tape = Tape::new();
        let ia = tape.leaf(a, false);
        let ib = tape.leaf(b, false);
        let ibt = tape.leaf(bt, false);
        let via_tb = tape.matmul_transpose_b(ia, ib).unwrap();
        let via_mm = tape.matmul(ia, ibt).unwrap();
        assert!(tape.value(via_tb).max_abs_diff(tape.value(via_mm)) < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_cross_entropy_matches_log_softmax() {
        let mut r = rng(2);
        let logits = Tensor::randn(&[4, 5], 2.0, &mut r);
        let labels = [3usize, 0, 4, 1];

        let mut tape = Tape::new();
        let il = tape.leaf(logits.clone(), false);
        let sm = tape.softmax_rows(il).unwrap();
        for row in tape.value(sm).data().chunks_exact(5) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        let ce = tape.softmax_cross_entropy(il, &labels).unwrap();
        let mut expect = 0.0;
        for (r2, &lab) in labels.iter().enumerate() {
            expect += -log_softmax_at(&logits.data()[r2 * 5..(r2 + 1) * 5], lab);
        }
        expect /= labels.len() as f64;
        assert!((tape.value(ce).scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn attention_matches_naive_single_head_reference() {
        // One batch, one head: compare against a direct dense computation.
        let mut r = rng(3);
        let seq = 4;
        let h = 3;
        let q = Tensor::randn(&[seq, h], 1.0, &mut r);
        let k = Tensor::randn(&[seq, h], 1.0, &mut r);
        let v = Tensor::randn(&[seq, h], 1.0, &mut r);

        let mut expect = vec![0.0; seq * h];
        let scale = 1.0 / (h as f64).sqrt();
        for i in 0..seq {
            let mut scores = vec![0.0; seq];
            for (j, score) in scores.iter_mut().enumerate() {
                for d in 0..h {
                    *score += q.data()[i * h + d] * k.data()[j * h + d];
                }
                *score *= scale;
            }
            let p = softmax_row(&scores);
            for (j, &pj) in p.iter().enumerate() {
                for d in 0..h {
                    expect[i * h + d] += pj * v.data()[j * h + d];
                }
            }
        }

        let mut tape = Tape::new();
        let iq = tape.leaf(q, false);
        let ik = tape.leaf(k, false);
        let iv = tape.leaf(v, false);
        let out = tape.multi_head_attention(iq, ik, iv, 1, 1).unwrap();
        let expect = Tensor::new(vec![seq, h], expect).unwrap();
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn multi_head_splits_are_independent() {
        // With 2 heads, permuting the second half of the feature dim must
        // not change the first half of the output.
        let mut r = rng(4);
        let seq = 3;
        let q = Tensor::randn(&[seq, 4], 1.0, &mut r);
        let k = Tensor::randn(&[seq, 4], 1.0, &mut r);
        let v = Tensor::randn(&[seq, 4], 1.0, &mut r);

        let run = |qv: &Tensor, kv: &Tensor, vv: &Tensor| {
            let mut tape = Tape::new();
            let iq = tape.leaf(qv.clone(), false);
            let ik = tape.leaf(kv.clone(), false);
            let iv = tape.leaf(vv.clone(), false);
            let out = tape.multi_head_attention(iq, ik, iv, 1, 2).unwrap();
            tape.value(out).clone()
        };
        let base = run(&q, &k, &v);

        let mut k2 = k.clone();
        for row in 0..seq {
            k2.data_mut().swap(row * 4 + 2, row * 4 + 3);
        }
        let perturbed = run(&q, &k2, &v);
        for row in 0..seq {
            for d in 0..2 {
                assert_eq!(base.data()[row * 4 + d], perturbed.data()[row * 4 + d]);
            }
        }
    }

    #[test]
    fn gradients_pass_finite_difference_checks() {
        let mut r = rng(5);
        let mut total = 0;

        // matmul -> sum
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        total += fd_check(
            &|t, ids| {
                let m = t.matmul(ids[0], ids[1]).unwrap();
                t.sum_all(m).unwrap()
            },
            &[a, b],
            1e-6,
        );

        // matmul_transpose_b -> gelu -> sum
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[2, 4], 1.0, &mut r);
        total += fd_check(
            &|t, ids| {
                let m = t.matmul_transpose_b(ids[0], ids[1]).unwrap();
                let g = t.gelu(m).unwrap();
                t.sum_all(g).unwrap()
            },
            &[a, b],
            1e-6,
        );

        // layer_norm -> scale -> sum
        let x = Tensor::randn(&[4, 6], 2.0, &mut r);
        let gamma = Tensor::randn(&[6], 0.5, &mut r);
        let beta = Tensor::randn(&[6], 0.5, &mut r);
        total += fd_check(
            &|t, ids| {
                let ln = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let s = t.scale(ln, 1.5).unwrap();
                t.sum_all(s).unwrap()
            },
            &[x, gamma, beta],
            1e-5,
        );

        // attention -> cross-entropy pipeline
        let q = Tensor::randn(&[4, 4], 1.0, &mut r);
        let k = Tensor::randn(&[4, 4], 1.0, &mut r);
        let v = Tensor::randn(&[4, 4], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3], 1.0, &mut r);
        let bias = Tensor::randn(&[3], 0.2, &mut r);
        total += fd_check(
            &|t, ids| {
                let at = t.multi_head_attention(ids[0], ids[1], ids[2], 2, 2).unwrap();
                let pooled = t.mean_pool_rows(at, 2).unwrap();
                let logits = t.matmul(pooled, ids[3]).unwrap();
                let logits = t.add_row_bias(logits, ids[4]).unwrap();
                t.softmax_cross_entropy(logits, &[0, 2]).unwrap()
            },
            &[q, k, v, w, bias],
            1e-5,
        );

        // embed -> add -> softmax_rows -> sum of squares proxy via scale
        let table = Tensor::randn(&[5, 3], 1.0, &mut r);
        let shift = Tensor::randn(&[4, 3], 1.0, &mut r);
        total += fd_check(
            &|t, ids| {
                let e = t.embed_lookup(ids[0], &[1, 4, 0, 1]).unwrap();
                let s = t.add(e, ids[1]).unwrap();
                let p = t.softmax_rows(s).unwrap();
                let g = t.gelu(p).unwrap();
                t.sum_all(g).unwrap()
            },
            &[table, shift],
            1e-5,
        );

        assert!(total >= 100, "only {total} coordinates checked");
    }

    #[test]
    fn frozen_leaves_get_no_gradient_and_detached_trainables_get_zeros() {
        let mut r = rng(6);
        let a = Tensor::randn(&[2, 2], 1.0, &mut r);
        let b = Tensor::randn(&[2, 2], 1.0, &mut r);
        let unused = Tensor::randn(&[3], 1.0, &mut r);

        let mut tape = Tape::new();
        let ia = tape.leaf(a, true);
        let ib = tape.leaf(b, false);
        let iu = tape.leaf(unused, true);
        let m = tape.matmul(ia, ib).unwrap();
        let loss = tape.sum_all(m).unwrap();
        let grads = tape.backward(loss).unwrap();

        assert!(grads.get(ia).is_some());
        assert!(grads.get(ib).is_none(), "frozen leaf must have no buffer");
        let gu = grads.get(iu).expect("trainable leaf always has a buffer");
        assert!(gu.data().iter().all(|&v| v == 0.0));
        assert!(grads.get(m).is_none(), "interior nodes have no buffer");
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 2]), true);
        match tape.backward(a) {
            Err(Error::Contract(_)) => {}
            other => panic!("expected contract error, got {other:?}"),
        }
    }

    #[test]
    fn backward_from_seeds_an_interior_value() {
        // d(sum(2x))/dx = 2, seeded through the scale output.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(&[2, 3], 1.5), true);
        let y = tape.scale(x, 2.0).unwrap();
        let seed = Tensor::filled(&[2, 3], 1.0);
        let grads = tape.backward_from(y, &seed).unwrap();
        let gx = grads.get(x).unwrap();
        assert!(gx.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn shape_mismatches_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
        let b = tape.leaf(Tensor::zeros(&[4, 5]), false);
        match tape.matmul(a, b) {
            Err(Error::DimensionMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn rejects_out_of_range_tokens_and_labels() {
        let mut tape = Tape::new();
        let table = tape.leaf(Tensor::zeros(&[4, 2]), false);
        assert!(matches!(
            tape.embed_lookup(table, &[0, 4]),
            Err(Error::InvalidArgument(_))
        ));
        let logits = tape.leaf(Tensor::zeros(&[2, 3]), false);
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0, 3]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn replay_reproduces_every_value_bit_exactly() {
        let mut r = rng(7);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[4, 4], 1.0, &mut r), true);
        let g = tape.leaf(Tensor::filled(&[4], 1.0), false);
        let bta = tape.leaf(Tensor::zeros(&[4]), false);
        let ln = tape.layer_norm(x, g, bta, 1e-5).unwrap();
        let at = tape.multi_head_attention(ln, ln, ln, 2, 2).unwrap();
        let gl = tape.gelu(at).unwrap();
        let pooled = tape.mean_pool_rows(gl, 2).unwrap();
        let w = tape.leaf(Tensor::randn(&[4, 2], 1.0, &mut r), true);
        let logits = tape.matmul(pooled, w).unwrap();
        tape.softmax_cross_entropy(logits, &[1, 0]).unwrap();

        let replayed = tape.replay().unwrap();
        assert_eq!(replayed.len(), tape.len());
        for (i, t) in replayed.iter().enumerate() {
            assert_eq!(t.data(), tape.value(ValueId(i)).data(), "slot {i}");
        }
    }

    #[test]
    fn identical_seeds_give_bit_identical_graphs() {
        let build = || {
            let mut r = rng(8);
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::randn(&[5, 5], 1.0, &mut r), true);
            let b = tape.leaf(Tensor::randn(&[5, 5], 1.0, &mut r), true);
            let m = tape.matmul(a, b).unwrap();
            let g = tape.gelu(m).unwrap();
            let loss = tape.sum_all(g).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).scalar_value(),
                grads.get(a).unwrap().clone(),
            )
        };
        let (l1, g1) = build();
        let (l2, g2) = build();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1.data(), g2.data());
        assert!(g1.data().iter().all(|v| v.is_finite()));
    }
}
