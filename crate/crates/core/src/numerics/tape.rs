//! Wengert tape: every primitive records its inputs, backward replays the
//! record in reverse order.
//!
//! Nodes are appended in execution order, so the arena index order is a
//! topological order. Leaves may borrow their storage (model parameters) to
//! avoid copying weights into every per-sample tape.

use std::borrow::Cow;

use super::tensor::{gemm_acc, gemm_at_acc, gemm_bt_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, p: usize },
    MatMulBt { a: Var, b: Var, m: usize, k: usize, p: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { x: Var, row: Var },
    MulRow { x: Var, row: Var },
    Scale { x: Var, c: f64 },
    Gelu { x: Var },
    Sigmoid { x: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SoftmaxTemperature { w: Var, tau: f64 },
    SoftmaxRows { x: Var },
    ConvDepthwise { x: Var, kernels: Var, k: usize },
    ConvPointwise { x: Var, weight: Var, bias: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<f64>, count: usize },
    MeanRows { x: Var },
    Sum { x: Var },
    Mean { x: Var },
    WeightedSum { inputs: Vec<Var>, weights: Var },
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows { parts: Vec<Var> },
    SliceRows { x: Var, start: usize, len: usize },
    Reshape { x: Var },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    /// True when any requires_grad leaf is upstream of this node.
    needs_grad: bool,
}

/// Record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`]; populated only for leaves
/// registered with `requires_grad`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of populated gradient slots.
    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs_need: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad: false,
            needs_grad: inputs_need,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf_cow(Cow::Owned(t), false)
    }

    /// Leaf input with an explicit gradient flag.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.leaf_cow(Cow::Owned(t), requires_grad)
    }

    /// Leaf that borrows external storage (model parameters).
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.leaf_cow(Cow::Borrowed(t), requires_grad)
    }

    fn leaf_cow(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(Error::Contract(format!("{op} expects a matrix, got shape {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, p) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let t = Tensor::new(vec![m, p], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul { a, b, m, k, p }, ng))
    }

    /// a · bᵀ for a: M×K, b: P×K.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_bt")?;
        let (p, k2) = self.dims2(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::dim("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        gemm_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, p);
        let t = Tensor::new(vec![m, p], out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMulBt { a, b, m, k, p }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    /// Adds a length-D row to every row of an N×D matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(row).numel() != d {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow { x, row }, ng))
    }

    /// Multiplies every row of an N×D matrix elementwise by a length-D row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(row).numel() != d {
            return Err(Error::dim("mul_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, &g) in chunk.iter_mut().zip(r) {
                *o *= g;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::MulRow { x, row }, ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        let ng = self.ng(x);
        self.push(t, Op::Scale { x, c }, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(t, Op::Gelu { x }, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid { x }, ng)
    }

    /// Row-wise layer normalization (population variance) with affine gain
    /// and bias of length D.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if d < 2 {
            return Err(Error::Domain(format!(
                "layer_norm needs at least 2 features, got {d}"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
        }
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let xv = self.value(x);
        let n = xv.rows();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, ng))
    }

    /// Temperature softmax over a vector, max-subtracted.
    pub fn softmax_temperature(&mut self, w: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("temperature must be > 0, got {tau}")));
        }
        let wv = self.value(w).data();
        if wv.is_empty() {
            return Err(Error::Domain("softmax over an empty vector".into()));
        }
        // exp underflows once a gap exceeds ~745τ; fusion weights stay strictly
        // positive, at a cost of at most K·MIN_POSITIVE to the sum.
        let p = softmax_slice(wv, tau).into_iter().map(|x| x.max(f64::MIN_POSITIVE)).collect();
        let t = Tensor::vector(p);
        let ng = self.ng(w);
        Ok(self.push(t, Op::SoftmaxTemperature { w, tau }, ng))
    }

    /// Row-wise softmax. With `causal`, entries above the diagonal get
    /// probability zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let width = if causal { (i + 1).min(d) } else { d };
            let p = softmax_slice(&xv.row(i)[..width], 1.0);
            out[i * d..i * d + width].copy_from_slice(&p);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SoftmaxRows { x }, ng))
    }

    /// Per-channel 1-D convolution along the token axis with zero padding;
    /// `kernels` is D×k with k odd.
    pub fn conv1d_depthwise(&mut self, x: Var, kernels: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "conv1d_depthwise")?;
        let (kd, k) = self.dims2(kernels, "conv1d_depthwise")?;
        if kd != d {
            return Err(Error::dim("conv1d_depthwise", self.shape(x), self.shape(kernels)));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("depthwise kernel width must be odd, got {k}")));
        }
        let half = (k - 1) / 2;
        let xv = self.value(x).data();
        let kv = self.value(kernels).data();
        let mut out = vec![0.0; n * d];
        for t in 0..n {
            for j in 0..k {
                let src = t as isize + j as isize - half as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let src = src as usize;
                for c in 0..d {
                    out[t * d + c] += kv[c * k + j] * xv[src * d + c];
                }
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        let ng = self.ng(x) || self.ng(kernels);
        Ok(self.push(t, Op::ConvDepthwise { x, kernels, k }, ng))
    }

    /// Kernel-size-1 convolution: a per-token linear map with bias.
    pub fn conv1d_pointwise(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "conv1d_pointwise")?;
        let (d2, dout) = self.dims2(weight, "conv1d_pointwise")?;
        if d != d2 || self.value(bias).numel() != dout {
            return Err(Error::dim("conv1d_pointwise", self.shape(x), self.shape(weight)));
        }
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0; n * dout];
        for t in 0..n {
            let orow = &mut out[t * dout..(t + 1) * dout];
            for c in 0..d {
                let xval = xv[t * d + c];
                let wrow = &wv[c * dout..(c + 1) * dout];
                for (o, &w) in orow.iter_mut().zip(wrow) {
                    *o += xval * w;
                }
            }
            for (o, &b) in orow.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let t = Tensor::new(vec![n, dout], out)?;
        let ng = self.ng(x) || self.ng(weight) || self.ng(bias);
        Ok(self.push(t, Op::ConvPointwise { x, weight, bias }, ng))
    }

    /// Mean token cross-entropy over masked-in positions.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t_len, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t_len || mask.len() != t_len {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; t_len * v];
        let mut total = 0.0;
        for t in 0..t_len {
            if !mask[t] {
                continue;
            }
            let target = targets[t];
            if target >= v {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: target,
                    size: v,
                });
            }
            let row = lv.row(t);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
            for j in 0..v {
                probs[t * v + j] = (row[j] - lse).exp();
            }
        }
        let loss = Tensor::scalar(total / count as f64);
        let ng = self.ng(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean over the token (row) axis: N×D -> D.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (o, &v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let ng = self.ng(x);
        self.push(Tensor::vector(out), Op::MeanRows { x }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, ng)
    }

    /// Σ_l weights[l] · inputs[l] over same-shape inputs.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("weighted_sum over no inputs".into()))?;
        if self.value(weights).numel() != inputs.len() {
            return Err(Error::dim("weighted_sum", &[inputs.len()], self.shape(weights)));
        }
        let shape = self.shape(first).to_vec();
        let mut out = vec![0.0; self.value(first).numel()];
        for (l, &h) in inputs.iter().enumerate() {
            if self.shape(h) != shape.as_slice() {
                return Err(Error::dim("weighted_sum", &shape, self.shape(h)));
            }
            let a = self.value(weights).data()[l];
            for (o, &v) in out.iter_mut().zip(self.value(h).data()) {
                *o += a * v;
            }
        }
        let ng = self.ng(weights) || inputs.iter().any(|&h| self.ng(h));
        let t = Tensor::new(shape, out)?;
        Ok(self.push(
            t,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
            },
            ng,
        ))
    }

    /// Row lookup into a V×D table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "gather",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows over no inputs".into()))?;
        let d = self.value(first).cols();
        let mut out = Vec::new();
        let mut n = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(Error::dim("concat_rows", self.shape(first), pv.shape()));
            }
            n += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            t,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        if start + len > n {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                size: n,
            });
        }
        let t = Tensor::new(vec![len, d], xv.data()[start * d..(start + len) * d].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::SliceRows { x, start, len }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape { x }, ng))
    }

    /// Reverse sweep from a scalar `loss`. Adjoints accumulate additively
    /// across every use of a node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        grads[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                Op::MatMul { a, b, m, k, p } => {
                    let (m, k, p) = (*m, *k, *p);
                    if self.ng(*a) {
                        let da = self.slot(&mut adj, *a);
                        // dA += dC · Bᵀ
                        gemm_bt_acc(&g, self.value(*b).data(), da, m, p, k);
                    }
                    if self.ng(*b) {
                        let db = self.slot(&mut adj, *b);
                        // dB += Aᵀ · dC
                        gemm_at_acc(self.value(*a).data(), &g, db, m, k, p);
                    }
                }
                Op::MatMulBt { a, b, m, k, p } => {
                    let (m, k, p) = (*m, *k, *p);
                    if self.ng(*a) {
                        let da = self.slot(&mut adj, *a);
                        // dA += dC · B
                        gemm_acc(&g, self.value(*b).data(), da, m, p, k);
                    }
                    if self.ng(*b) {
                        let db = self.slot(&mut adj, *b);
                        // dB += dCᵀ · A
                        gemm_at_acc(&g, self.value(*a).data(), db, m, p, k);
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if self.ng(v) {
                            axpy(self.slot(&mut adj, v), 1.0, &g);
                        }
                    }
                }
                Op::Sub { a, b } => {
                    if self.ng(*a) {
                        axpy(self.slot(&mut adj, *a), 1.0, &g);
                    }
                    if self.ng(*b) {
                        axpy(self.slot(&mut adj, *b), -1.0, &g);
                    }
                }
                Op::Mul { a, b } => {
                    if self.ng(*a) {
                        let bv = self.value(*b).data();
                        let da = self.slot(&mut adj, *a);
                        for ((d, &gi), &bi) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                    if self.ng(*b) {
                        let av = self.value(*a).data();
                        let db = self.slot(&mut adj, *b);
                        for ((d, &gi), &ai) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * ai;
                        }
                    }
                }
                Op::AddRow { x, row } => {
                    if self.ng(*x) {
                        axpy(self.slot(&mut adj, *x), 1.0, &g);
                    }
                    if self.ng(*row) {
                        let dr = self.slot(&mut adj, *row);
                        let d = dr.len();
                        for chunk in g.chunks(d) {
                            axpy(dr, 1.0, chunk);
                        }
                    }
                }
                Op::MulRow { x, row } => {
                    let d = self.value(*row).numel();
                    if self.ng(*x) {
                        let rv = self.value(*row).data();
                        let dx = self.slot(&mut adj, *x);
                        for (dchunk, gchunk) in dx.chunks_mut(d).zip(g.chunks(d)) {
                            for ((o, &gi), &r) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                                *o += gi * r;
                            }
                        }
                    }
                    if self.ng(*row) {
                        let xv = self.value(*x).data();
                        let dr = self.slot(&mut adj, *row);
                        for (xchunk, gchunk) in xv.chunks(d).zip(g.chunks(d)) {
                            for ((o, &gi), &xi) in dr.iter_mut().zip(gchunk).zip(xchunk) {
                                *o += gi * xi;
                            }
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if self.ng(*x) {
                        axpy(self.slot(&mut adj, *x), *c, &g);
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x).data();
                    let dx = self.slot(&mut adj, *x);
                    for ((o, &gi), &xi) in dx.iter_mut().zip(&g).zip(xv) {
                        *o += gi * gelu_grad(xi);
                    }
                }
                Op::Sigmoid { x } => {
                    let sv = node.value.data();
                    let dx = self.slot(&mut adj, *x);
                    for ((o, &gi), &s) in dx.iter_mut().zip(&g).zip(sv) {
                        *o += gi * s * (1.0 - s);
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let d = self.value(*gain).numel();
                    if self.ng(*gain) {
                        let dg = self.slot(&mut adj, *gain);
                        for (gc, hc) in g.chunks(d).zip(xhat.chunks(d)) {
                            for ((o, &gi), &h) in dg.iter_mut().zip(gc).zip(hc) {
                                *o += gi * h;
                            }
                        }
                    }
                    if self.ng(*bias) {
                        let db = self.slot(&mut adj, *bias);
                        for gc in g.chunks(d) {
                            axpy(db, 1.0, gc);
                        }
                    }
                    if self.ng(*x) {
                        let gv = self.value(*gain).data();
                        let dx = self.slot(&mut adj, *x);
                        let mut dh = vec![0.0; d];
                        for (row, ((gc, hc), dxc)) in g
                            .chunks(d)
                            .zip(xhat.chunks(d))
                            .zip(dx.chunks_mut(d))
                            .enumerate()
                        {
                            for j in 0..d {
                                dh[j] = gc[j] * gv[j];
                            }
                            let m1 = dh.iter().sum::<f64>() / d as f64;
                            let m2 = dh.iter().zip(hc).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                            let r = rstd[row];
                            for j in 0..d {
                                dxc[j] += r * (dh[j] - m1 - hc[j] * m2);
                            }
                        }
                    }
                }
                Op::SoftmaxTemperature { w, tau } => {
                    let a = node.value.data();
                    let dot: f64 = a.iter().zip(&g).map(|(p, q)| p * q).sum();
                    let dw = self.slot(&mut adj, *w);
                    for ((o, &ai), &gi) in dw.iter_mut().zip(a).zip(&g) {
                        *o += ai * (gi - dot) / tau;
                    }
                }
                Op::SoftmaxRows { x } => {
                    let p = node.value.data();
                    let d = node.value.cols();
                    let dx = self.slot(&mut adj, *x);
                    for ((pc, gc), dc) in p.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)) {
                        let dot: f64 = pc.iter().zip(gc).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dc[j] += pc[j] * (gc[j] - dot);
                        }
                    }
                }
                Op::ConvDepthwise { x, kernels, k } => {
                    let k = *k;
                    let half = (k - 1) / 2;
                    let (n, d) = (self.value(*x).rows(), self.value(*x).cols());
                    if self.ng(*x) {
                        let kv = self.value(*kernels).data();
                        let dx = self.slot(&mut adj, *x);
                        for t in 0..n {
                            for j in 0..k {
                                let src = t as isize + j as isize - half as isize;
                                if src < 0 || src >= n as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for c in 0..d {
                                    dx[src * d + c] += kv[c * k + j] * g[t * d + c];
                                }
                            }
                        }
                    }
                    if self.ng(*kernels) {
                        let xv = self.value(*x).data();
                        let dk = self.slot(&mut adj, *kernels);
                        for t in 0..n {
                            for j in 0..k {
                                let src = t as isize + j as isize - half as isize;
                                if src < 0 || src >= n as isize {
                                    continue;
                                }
                                let src = src as usize;
                                for c in 0..d {
                                    dk[c * k + j] += xv[src * d + c] * g[t * d + c];
                                }
                            }
                        }
                    }
                }
                Op::ConvPointwise { x, weight, bias } => {
                    let (n, d) = (self.value(*x).rows(), self.value(*x).cols());
                    let dout = self.value(*bias).numel();
                    if self.ng(*x) {
                        let dx = self.slot(&mut adj, *x);
                        gemm_bt_acc(&g, self.value(*weight).data(), dx, n, dout, d);
                    }
                    if self.ng(*weight) {
                        let dw = self.slot(&mut adj, *weight);
                        gemm_at_acc(self.value(*x).data(), &g, dw, n, d, dout);
                    }
                    if self.ng(*bias) {
                        let db = self.slot(&mut adj, *bias);
                        for gc in g.chunks(dout) {
                            axpy(db, 1.0, gc);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let v = self.value(*logits).cols();
                    let scale = g[0] / *count as f64;
                    let dl = self.slot(&mut adj, *logits);
                    for (t, &on) in mask.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == targets[t] { 1.0 } else { 0.0 };
                            dl[t * v + j] += scale * (probs[t * v + j] - onehot);
                        }
                    }
                }
                Op::MeanRows { x } => {
                    let n = self.value(*x).rows();
                    let d = g.len();
                    let dx = self.slot(&mut adj, *x);
                    for chunk in dx.chunks_mut(d) {
                        axpy(chunk, 1.0 / n as f64, &g);
                    }
                }
                Op::Sum { x } => {
                    let dx = self.slot(&mut adj, *x);
                    for o in dx.iter_mut() {
                        *o += g[0];
                    }
                }
                Op::Mean { x } => {
                    let dx = self.slot(&mut adj, *x);
                    let s = g[0] / dx.len() as f64;
                    for o in dx.iter_mut() {
                        *o += s;
                    }
                }
                Op::WeightedSum { inputs, weights } => {
                    let a = self.value(*weights).data().to_vec();
                    for (l, &h) in inputs.iter().enumerate() {
                        if self.ng(h) {
                            axpy(self.slot(&mut adj, h), a[l], &g);
                        }
                    }
                    if self.ng(*weights) {
                        let dots: Vec<f64> = inputs
                            .iter()
                            .map(|&h| self.value(h).data().iter().zip(&g).map(|(x, y)| x * y).sum())
                            .collect();
                        let dw = self.slot(&mut adj, *weights);
                        for (o, d) in dw.iter_mut().zip(dots) {
                            *o += d;
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let d = self.value(*table).cols();
                    let dt = self.slot(&mut adj, *table);
                    for (t, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * d..(id + 1) * d], 1.0, &g[t * d..(t + 1) * d]);
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        if self.ng(p) {
                            axpy(self.slot(&mut adj, p), 1.0, &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::SliceRows { x, start, len } => {
                    let d = self.value(*x).cols();
                    let dx = self.slot(&mut adj, *x);
                    axpy(&mut dx[start * d..(start + len) * d], 1.0, &g);
                }
                Op::Reshape { x } => {
                    axpy(self.slot(&mut adj, *x), 1.0, &g);
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'s>(&self, adj: &'s mut [Option<Vec<f64>>], v: Var) -> &'s mut Vec<f64> {
        adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()])
    }
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub(crate) fn softmax_slice(w: &[f64], tau: f64) -> Vec<f64> {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = w.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
