//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape. Parents always precede
//! their consumers, so a reverse sweep over the tape is a valid
//! topological order for the backward pass.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const GELU_COEFF: f64 = 0.044715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Which primitive produced a node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    MatMulBt,
    Add,
    AddRow,
    MaskMul,
    Sigmoid,
    Gelu,
    Softmax,
    LayerNorm,
    Gather,
    Lerp,
    Attention,
    CrossEntropy,
    Sum,
}

/// Batch layout for [`Graph::attention`].
///
/// Queries are `batch * q_len` rows and keys/values are `batch * k_len`
/// rows, grouped by batch element. Only the first `key_lens[b]` keys of
/// element `b` are visible; with `causal`, query `i` additionally sees
/// only keys `j <= i`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub key_lens: Vec<usize>,
    pub causal: bool,
}

impl AttentionSpec {
    fn visible_keys(&self, b: usize, i: usize) -> usize {
        let len = self.key_lens[b];
        if self.causal {
            len.min(i + 1)
        } else {
            len
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    MaskMul(NodeId, Vec<f64>),
    Sigmoid(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Lerp {
        alpha: NodeId,
        a: NodeId,
        b: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Sum(NodeId),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulBt(..) => OpKind::MatMulBt,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MaskMul(..) => OpKind::MaskMul,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gather { .. } => OpKind::Gather,
            Op::Lerp { .. } => OpKind::Lerp,
            Op::Attention { .. } => OpKind::Attention,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(_) => OpKind::Sum,
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::MatMulBt(a, b) | Op::Add(a, b) | Op::AddRow(a, b) => {
                vec![a, b]
            }
            Op::MaskMul(x, _) | Op::Sigmoid(x) | Op::Gelu(x) | Op::Softmax(x) | Op::Sum(x) => {
                vec![x]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Gather { table, .. } => vec![table],
            Op::Lerp { alpha, a, b } => vec![alpha, a, b],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf with no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes[id.0].op.parents()
    }

    /// Gradient accumulated at `id`; zeros when nothing reached it.
    pub fn grad(&self, id: NodeId) -> Tensor {
        let node = &self.nodes[id.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn take_grad(&mut self, id: NodeId) -> Tensor {
        let node = &mut self.nodes[id.0];
        node.grad
            .take()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Attention probabilities recorded by an attention node, laid out as
    /// `[batch, heads, q_len, k_len]` with zeros at masked positions.
    pub fn attention_weights(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Test hook: scales every input gradient produced by `kind` by 1.5.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(op.parents().iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op) -> NodeId {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    fn matrix_dims(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let v = self.value(id);
        if v.rank() != 2 {
            return Err(Error::Dimension(format!(
                "{what} expects a matrix, got shape {:?}",
                v.shape()
            )));
        }
        Ok((v.shape()[0], v.shape()[1]))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} by {:?}: inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a` of shape `[m, k]` and `b` of shape `[n, k]`.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix_dims(a, "matmul_bt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_bt of {:?} by transposed {:?}: inner dimensions differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push_op(value, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "add of {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Add(a, b)))
    }

    /// Adds a rank-1 `bias` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rank() != 1 || vb.len() != va.cols() {
            return Err(Error::Dimension(format!(
                "row bias {:?} does not match {:?}",
                vb.shape(),
                va.shape()
            )));
        }
        let c = va.cols();
        let bd = vb.data();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bd[i % c])
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::AddRow(a, bias)))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mask_mul(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        let vx = self.value(x);
        if mask.len() != vx.len() {
            return Err(Error::Dimension(format!(
                "mask of length {} for shape {:?}",
                mask.len(),
                vx.shape()
            )));
        }
        let data = vx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::MaskMul(x, mask)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push_op(value, Op::Sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push_op(value, Op::Gelu(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), data).expect("same shape");
        self.push_op(value, Op::Softmax(x))
    }

    /// Per-row normalization to zero mean and unit variance followed by
    /// the affine map `gain * x̂ + bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let vx = self.value(x);
        let c = vx.cols();
        for (id, what) in [(gain, "gain"), (bias, "bias")] {
            let v = self.value(id);
            if v.rank() != 1 || v.len() != c {
                return Err(Error::Dimension(format!(
                    "layer_norm {what} {:?} does not match {:?}",
                    v.shape(),
                    vx.shape()
                )));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.rows();
        let mut xhat = vec![0.0; vx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx.data()[r * c..(r + 1) * c];
            let mean = row_mean(row);
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..c {
                let xh = (row[j] - mean) * inv;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push_op(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, d) = self.matrix_dims(table, "gather")?;
        if ids.is_empty() {
            return Err(Error::Dimension("gather with no ids".into()));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index(format!("row {id} out of range for {rows} rows")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push_op(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `alpha ⊙ a + (1 − alpha) ⊙ b`; `alpha` is either `[rows, 1]`
    /// (broadcast across columns) or the same shape as `a`.
    pub fn lerp(&mut self, alpha: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb, vw) = (self.value(a), self.value(b), self.value(alpha));
        if va.shape() != vb.shape() {
            return Err(Error::Dimension(format!(
                "lerp endpoints {:?} and {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let c = va.cols();
        let broadcast = vw.rows() == va.rows() && vw.cols() == 1 && c != 1;
        if !broadcast && vw.shape() != va.shape() {
            return Err(Error::Dimension(format!(
                "lerp weight {:?} does not fit {:?}",
                vw.shape(),
                va.shape()
            )));
        }
        let wd = vw.data();
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .enumerate()
            .map(|(i, (x, y))| {
                let w = if broadcast { wd[i / c] } else { wd[i] };
                w * x + (1.0 - w) * y
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Lerp { alpha, a, b }))
    }

    /// Multi-head scaled dot-product attention over a batch.
    ///
    /// Masked keys are skipped outright, so their weights are exactly zero
    /// and the output of a query never depends on keys it cannot see.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttentionSpec) -> Result<NodeId> {
        let (qr, d) = self.matrix_dims(q, "attention query")?;
        let (kr, dk) = self.matrix_dims(k, "attention key")?;
        let (vr, dv) = self.matrix_dims(v, "attention value")?;
        if dk != d || dv != d || kr != vr {
            return Err(Error::Dimension(format!(
                "attention q {:?}, k {:?}, v {:?}",
                self.value(q).shape(),
                self.value(k).shape(),
                self.value(v).shape()
            )));
        }
        let AttentionSpec {
            batch,
            q_len,
            k_len,
            heads,
            ..
        } = spec;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("width {d} not divisible into {heads} heads")));
        }
        if qr != batch * q_len || kr != batch * k_len || spec.key_lens.len() != batch {
            return Err(Error::Dimension(format!(
                "attention layout {spec:?} does not match {qr} query rows and {kr} key rows"
            )));
        }
        if spec.key_lens.iter().any(|&l| l == 0 || l > k_len) {
            return Err(Error::Dimension(format!("invalid key lengths {:?}", spec.key_lens)));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; qr * d];
        let mut probs = vec![0.0; batch * heads * q_len * k_len];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..q_len {
                    let visible = spec.visible_keys(b, i);
                    let qoff = (b * q_len + i) * d + h * dh;
                    let qrow = &qd[qoff..qoff + dh];
                    let poff = ((b * heads + h) * q_len + i) * k_len;
                    let p = &mut probs[poff..poff + visible];
                    for (j, pj) in p.iter_mut().enumerate() {
                        let koff = (b * k_len + j) * d + h * dh;
                        *pj = dot(qrow, &kd[koff..koff + dh]) * scale;
                    }
                    softmax_in_place(p);
                    let orow = &mut out[qoff..qoff + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let voff = (b * k_len + j) * d + h * dh;
                        axpy(pj, &vd[voff..voff + dh], orow);
                    }
                }
            }
        }
        let value = Tensor::new(vec![qr, d], out)?;
        Ok(self.push_op(value, Op::Attention { q, k, v, spec, probs }))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping positions whose target equals `ignore`.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize], ignore: Option<usize>) -> Result<NodeId> {
        let (t, vocab) = self.matrix_dims(logits, "cross_entropy_mean")?;
        if targets.len() != t {
            return Err(Error::Dimension(format!(
                "{} targets for {t} logit rows",
                targets.len()
            )));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; t * vocab];
        let mut kept = Vec::with_capacity(t);
        let mut total = 0.0;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            if Some(target) == ignore {
                kept.push(None);
                continue;
            }
            if target >= vocab {
                return Err(Error::Index(format!(
                    "target id {target} out of range for vocabulary of {vocab}"
                )));
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let lse = log_sum_exp(row);
            total -= row[target] - lse;
            for (p, &x) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            kept.push(Some(target));
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("no supervised positions".into()));
        }
        let value = Tensor::scalar(total / count as f64);
        Ok(self.push_op(
            value,
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x))
    }

    /// Back-propagates from a scalar node. Gradients add up across every
    /// path by which a node reaches `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.nodes[loss.0].grad = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let mut contributions = self.local_grads(i, g.data());
            self.nodes[i].grad = Some(g);
            if self.fault == Some(self.nodes[i].op.kind()) {
                for (_, c) in &mut contributions {
                    c.iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            for (parent, c) in contributions {
                let node = &mut self.nodes[parent.0];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&c).for_each(|(a, x)| *a += x),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), c)?),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient contributions of node `i` to each parent that tracks one.
    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let node = &self.nodes[i];
        let val = |id: NodeId| &self.nodes[id.0].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if self.needs(a) {
                    // dA = dC · Bᵀ
                    let bd = val(b).data();
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            da[r * k + p] = dot(grow, &bd[p * n..(p + 1) * n]);
                        }
                    }
                    out.push((a, da));
                }
                if self.needs(b) {
                    // dB = Aᵀ · dC
                    let ad = val(a).data();
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            axpy(ad[r * k + p], grow, &mut db[p * n..(p + 1) * n]);
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::MatMulBt(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[0];
                if self.needs(a) {
                    let bd = val(b).data();
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for j in 0..n {
                            axpy(g[r * n + j], &bd[j * k..(j + 1) * k], &mut da[r * k..(r + 1) * k]);
                        }
                    }
                    out.push((a, da));
                }
                if self.needs(b) {
                    let ad = val(a).data();
                    let mut db = vec![0.0; n * k];
                    for r in 0..m {
                        for j in 0..n {
                            axpy(g[r * n + j], &ad[r * k..(r + 1) * k], &mut db[j * k..(j + 1) * k]);
                        }
                    }
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if self.needs(p) {
                        out.push((p, g.to_vec()));
                    }
                }
            }
            &Op::AddRow(a, bias) => {
                if self.needs(a) {
                    out.push((a, g.to_vec()));
                }
                if self.needs(bias) {
                    let c = val(bias).len();
                    let mut db = vec![0.0; c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, x)| *d += x);
                    }
                    out.push((bias, db));
                }
            }
            Op::MaskMul(x, mask) => {
                if self.needs(*x) {
                    out.push((*x, g.iter().zip(mask).map(|(a, m)| a * m).collect()));
                }
            }
            &Op::Sigmoid(x) => {
                if self.needs(x) {
                    let y = node.value.data();
                    out.push((x, g.iter().zip(y).map(|(a, s)| a * s * (1.0 - s)).collect()));
                }
            }
            &Op::Gelu(x) => {
                if self.needs(x) {
                    let xd = val(x).data();
                    out.push((x, g.iter().zip(xd).map(|(a, &v)| a * gelu_derivative(v)).collect()));
                }
            }
            &Op::Softmax(x) => {
                if self.needs(x) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let mut dx = vec![0.0; y.len()];
                    for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                        let s = dot(yr, gr);
                        for j in 0..c {
                            dr[j] = yr[j] * (gr[j] - s);
                        }
                    }
                    out.push((x, dx));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = node.value.cols();
                let gd = val(*gain).data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let mut dxh = vec![0.0; c];
                    for (r, &inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        for j in 0..c {
                            dxh[j] = gr[j] * gd[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / c as f64;
                        let mean_dx = dot(&dxh, xr) / c as f64;
                        for j in 0..c {
                            dx[r * c + j] = inv * (dxh[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; c];
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    out.push((*gain, dg));
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                    }
                    out.push((*bias, db));
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let d = val(*table).cols();
                    let mut dt = vec![0.0; val(*table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                    }
                    out.push((*table, dt));
                }
            }
            &Op::Lerp { alpha, a, b } => {
                let (ad, bd, wd) = (val(a).data(), val(b).data(), val(alpha).data());
                let c = val(a).cols();
                let broadcast = wd.len() != ad.len();
                let w = |i: usize| if broadcast { wd[i / c] } else { wd[i] };
                if self.needs(alpha) {
                    let mut dw = vec![0.0; wd.len()];
                    for i in 0..g.len() {
                        let idx = if broadcast { i / c } else { i };
                        dw[idx] += g[i] * (ad[i] - bd[i]);
                    }
                    out.push((alpha, dw));
                }
                if self.needs(a) {
                    out.push((a, (0..g.len()).map(|i| g[i] * w(i)).collect()));
                }
                if self.needs(b) {
                    out.push((b, (0..g.len()).map(|i| g[i] * (1.0 - w(i))).collect()));
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let d = val(*q).cols();
                let dh = d / spec.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (mut dq, mut dk, mut dv) = (vec![0.0; qd.len()], vec![0.0; kd.len()], vec![0.0; vd.len()]);
                let mut ds = vec![0.0; spec.k_len];
                for b in 0..spec.batch {
                    for h in 0..spec.heads {
                        for i in 0..spec.q_len {
                            let visible = spec.visible_keys(b, i);
                            let qoff = (b * spec.q_len + i) * d + h * dh;
                            let go = &g[qoff..qoff + dh];
                            let poff = ((b * spec.heads + h) * spec.q_len + i) * spec.k_len;
                            let p = &probs[poff..poff + visible];
                            let mut weighted = 0.0;
                            for j in 0..visible {
                                let voff = (b * spec.k_len + j) * d + h * dh;
                                ds[j] = dot(go, &vd[voff..voff + dh]);
                                weighted += p[j] * ds[j];
                                axpy(p[j], go, &mut dv[voff..voff + dh]);
                            }
                            for j in 0..visible {
                                let s = p[j] * (ds[j] - weighted) * scale;
                                let koff = (b * spec.k_len + j) * d + h * dh;
                                axpy(s, &kd[koff..koff + dh], &mut dq[qoff..qoff + dh]);
                                axpy(s, &qd[qoff..qoff + dh], &mut dk[koff..koff + dh]);
                            }
                        }
                    }
                }
                for (p, grad) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.needs(p) {
                        out.push((p, grad));
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if self.needs(*logits) {
                    let vocab = val(*logits).cols();
                    let scale = g[0] / *count as f64;
                    let mut dl = vec![0.0; probs.len()];
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            let row = &mut dl[r * vocab..(r + 1) * vocab];
                            for (d, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                                *d = scale * p;
                            }
                            row[t] -= scale;
                        }
                    }
                    out.push((*logits, dl));
                }
            }
            &Op::Sum(x) => {
                if self.needs(x) {
                    out.push((x, vec![g[0]; val(x).len()]));
                }
            }
        }
        out
    }
}

/// Logistic function, clamped so the result stays strictly inside (0, 1)
/// even where the exact value rounds to an endpoint.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn gelu(x: f64) -> f64 {
    let u = (2.0 / PI).sqrt() * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let c = (2.0 / PI).sqrt();
    let t = (c * (x + GELU_COEFF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Mean with one refinement pass; exact for constant rows.
fn row_mean(row: &[f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    mean + row.iter().map(|x| x - mean).sum::<f64>() / n
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}
