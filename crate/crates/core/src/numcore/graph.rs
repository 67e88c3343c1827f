//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use super::tensor::gemm;
use super::{ParamId, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Variance floor used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// One block of a block-diagonal attention pattern: query rows
/// `q_start..q_start + q_len` attend to key rows `kv_start..kv_start + kv_len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

impl Segment {
    /// Self-attention over rows `start..start + len`.
    pub fn square(start: usize, len: usize) -> Self {
        Segment { q_start: start, q_len: len, kv_start: start, kv_len: len }
    }
}

/// Deliberately wrong backward rules, used to check that gradient checking
/// actually detects broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    GeluBackwardScale(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Sum(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    Gelu(NodeId),
    Embedding { table: NodeId, ids: Vec<usize> },
    ConcatLastDim(NodeId, NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, weights: Vec<f64>, total: f64, probs: Vec<f64> },
    Attention(Box<AttentionCache>),
    ScatterRows { x: NodeId, rows: Vec<usize> },
    ReplaceRows { x: NodeId, fill: NodeId, rows: Vec<usize> },
}

#[derive(Debug)]
struct AttentionCache {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    segments: Vec<Segment>,
    /// Attention probabilities per (segment, head), each `q_len x kv_len`.
    probs: Vec<Vec<f64>>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn leaf(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Build a gradient set directly (used by optimizer tests and accumulation).
    pub fn from_params(params: BTreeMap<ParamId, Tensor>) -> Self {
        Gradients { params, leaves: BTreeMap::new() }
    }

    /// Add another gradient set into this one.
    pub fn accumulate(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.get_mut(&id) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.params.insert(id, g);
                }
            }
        }
    }

    /// Global L2 norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        self.params.values().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }
}

/// A computation graph being recorded.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

/// Tanh-approximated GELU applied to one value.
pub fn gelu(x: f64) -> f64 {
    gelu_parts(x).0
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (v - m).exp();
        s += *d;
    }
    for d in dst.iter_mut() {
        *d /= s;
    }
}

fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
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

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn dims2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize)> {
        match self.shape(id) {
            &[r, c] => Ok((r, c)),
            s => Err(Error::shape(op, format!("expected a matrix, got extents {s:?}"))),
        }
    }

    /// A constant input. Gradients are reported for it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// A parameter leaf. Frozen parameters (`trainable == false`) get no gradient.
    pub fn param(&mut self, id: ParamId, value: &Tensor, trainable: bool) -> NodeId {
        self.push(value.clone(), Op::Param(id), trainable)
    }

    /// `a (n x k) @ b (k x m)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, k) = self.dims2("matmul", a)?;
        let (k2, m) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{n}x{k} @ {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, 1.0, self.value(a).data(), k, 1, self.value(b).data(), m, 1, 0.0, &mut out, m, 1);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", format!("{:?} + {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    /// Adds a length-`d` bias to every row of an `n x d` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, d) = self.dims2("add_bias", x)?;
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", format!("bias {:?} for rows of width {d}", self.shape(bias))));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d.max(1)) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let v = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(v, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).map(|e| e * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b))));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let v = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma` and `beta`. A constant row maps to `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims2("layer_norm", x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} for width {d}", self.shape(gamma), self.shape(beta)),
            ));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = Tensor::new(vec![n, d], out)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let d = src.last_dim().max(1);
        let mut out = vec![0.0; src.len()];
        for (s, o) in src.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(s, o);
        }
        let v = Tensor::new(src.shape().to_vec(), out).expect("same extents");
        let rg = self.rg(x);
        self.push(v, Op::Softmax(x), rg)
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let src = self.value(x);
        let d = src.last_dim().max(1);
        let mut out = vec![0.0; src.len()];
        for (s, o) in src.data().chunks(d).zip(out.chunks_mut(d)) {
            let lse = logsumexp(s);
            for (ov, sv) in o.iter_mut().zip(s) {
                *ov = sv - lse;
            }
        }
        let v = Tensor::new(src.shape().to_vec(), out).expect("same extents");
        let rg = self.rg(x);
        self.push(v, Op::LogSoftmax(x), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    /// Rows of `table (vocab x d)` selected by `ids`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (vocab, d) = self.dims2("embedding_lookup", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding_lookup", format!("id {bad} outside vocabulary of {vocab}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(v, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Row-wise concatenation `[a | b]`.
    pub fn concat_lastdim(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, da) = self.dims2("concat_lastdim", a)?;
        let (n2, db) = self.dims2("concat_lastdim", b)?;
        if n != n2 {
            return Err(Error::shape("concat_lastdim", format!("row counts {n} and {n2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (da + db));
        for i in 0..n {
            out.extend_from_slice(&av[i * da..(i + 1) * da]);
            out.extend_from_slice(&bv[i * db..(i + 1) * db]);
        }
        let v = Tensor::new(vec![n, da + db], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::ConcatLastDim(a, b), rg))
    }

    /// Weighted mean cross-entropy `sum_i w_i * CE_i / sum_i w_i`.
    ///
    /// Rows with zero weight are skipped entirely, so their logits cannot
    /// influence the value or receive gradient.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], weights: &[f64]) -> Result<NodeId> {
        let (n, k) = self.dims2("cross_entropy", logits)?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "cross_entropy",
                format!("{n} rows but {} targets and {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::shape("cross_entropy", format!("target {bad} outside {k} classes")));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument("cross_entropy weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument("cross_entropy needs a positive total weight".into()));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            if weights[i] == 0.0 {
                continue;
            }
            let row = &lv[i * k..(i + 1) * k];
            softmax_row(row, &mut probs[i * k..(i + 1) * k]);
            let ce = logsumexp(row) - row[targets[i]];
            loss += weights[i] * ce;
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), total, probs };
        Ok(self.push(Tensor::scalar(loss / total), op, rg))
    }

    /// Multi-head scaled dot-product attention over block-diagonal segments.
    ///
    /// `q` is `nq x d`, `k` and `v` are `nk x d`; `d` must divide into `heads`.
    /// Query rows outside every segment produce zeros. With `causal`, query
    /// `i` of a segment only sees keys `0..=i` of that segment.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Result<NodeId> {
        let (nq, d) = self.dims2("attention", q)?;
        let (nk, dk) = self.dims2("attention", k)?;
        let (nv, dv) = self.dims2("attention", v)?;
        if dk != d || dv != d || nk != nv {
            return Err(Error::shape("attention", format!("q {nq}x{d}, k {nk}x{dk}, v {nv}x{dv}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible into {heads} heads")));
        }
        for s in segments {
            if s.q_start + s.q_len > nq || s.kv_start + s.kv_len > nk {
                return Err(Error::shape("attention", format!("segment {s:?} outside {nq}/{nk} rows")));
            }
            if causal && s.q_len != s.kv_len {
                return Err(Error::shape("attention", format!("causal segment {s:?} is not square")));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; nq * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        for s in segments {
            for h in 0..heads {
                let (ql, kl) = (s.q_len, s.kv_len);
                let mut p = vec![0.0; ql * kl];
                if ql == 0 || kl == 0 {
                    probs.push(p);
                    continue;
                }
                let off_q = s.q_start * d + h * dh;
                let off_k = s.kv_start * d + h * dh;
                gemm(ql, dh, kl, scale, &qv[off_q..], d, 1, &kv[off_k..], 1, d, 0.0, &mut p, kl, 1);
                let mut tmp = vec![0.0; kl];
                for i in 0..ql {
                    let row = &mut p[i * kl..(i + 1) * kl];
                    if causal {
                        for x in row.iter_mut().skip(i + 1) {
                            *x = f64::NEG_INFINITY;
                        }
                    }
                    softmax_row(row, &mut tmp);
                    row.copy_from_slice(&tmp);
                }
                gemm(ql, kl, dh, 1.0, &p, kl, 1, &vv[off_k..], d, 1, 0.0, &mut out[off_q..], d, 1);
                probs.push(p);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let cache = AttentionCache { q, k, v, heads, segments: segments.to_vec(), probs };
        Ok(self.push(Tensor::new(vec![nq, d], out)?, Op::Attention(Box::new(cache)), rg))
    }

    /// Places the rows of `x` at positions `rows` of an `n x d` zero matrix.
    pub fn scatter_rows(&mut self, x: NodeId, rows: &[usize], n: usize) -> Result<NodeId> {
        let (r, d) = self.dims2("scatter_rows", x)?;
        if rows.len() != r || rows.iter().any(|&i| i >= n) {
            return Err(Error::shape("scatter_rows", format!("{r} rows into {n} with indices {rows:?}")));
        }
        let mut out = vec![0.0; n * d];
        let xv = self.value(x).data();
        for (src, &dst) in rows.iter().enumerate() {
            out[dst * d..(dst + 1) * d].copy_from_slice(&xv[src * d..(src + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::ScatterRows { x, rows: rows.to_vec() }, rg))
    }

    /// Copy of `x` with the listed rows overwritten by `fill`.
    pub fn replace_rows(&mut self, x: NodeId, fill: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (n, d) = self.dims2("replace_rows", x)?;
        if self.shape(fill) != [d] {
            return Err(Error::shape("replace_rows", format!("fill {:?} for width {d}", self.shape(fill))));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(Error::shape("replace_rows", format!("row {bad} outside {n} rows")));
        }
        let mut out = self.value(x).data().to_vec();
        let f = self.value(fill).data();
        for &i in rows {
            out[i * d..(i + 1) * d].copy_from_slice(f);
        }
        let rg = self.rg(x) || self.rg(fill);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::ReplaceRows { x, fill, rows: rows.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(NodeId(i), g);
                }
                Op::Param(pid) => match out.params.get_mut(pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(*pid, g);
                    }
                },
                op => self.backward_op(op, &node.value, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], id: NodeId, make: impl FnOnce() -> Tensor) {
        if !self.rg(id) {
            return;
        }
        let g = make();
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_op(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match op {
            Op::Leaf | Op::Param(_) => unreachable!("handled by caller"),
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2()?;
                let m = self.value(*b).last_dim();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || {
                    let mut da = vec![0.0; n * k];
                    gemm(n, m, k, 1.0, gd, m, 1, bv, 1, m, 0.0, &mut da, k, 1);
                    Tensor::new(vec![n, k], da).expect("extents")
                });
                self.acc(grads, *b, || {
                    let mut db = vec![0.0; k * m];
                    gemm(k, n, m, 1.0, av, 1, k, gd, m, 1, 0.0, &mut db, m, 1);
                    Tensor::new(vec![k, m], db).expect("extents")
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, || g.clone());
                self.acc(grads, *b, || {
                    let d = g.last_dim();
                    let mut db = vec![0.0; d];
                    for row in gd.chunks(d.max(1)) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::vector(db)
                });
            }
            Op::Scale(x, s) => self.acc(grads, *x, || g.map(|v| v * s)),
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, || {
                    let data = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(bv.shape().to_vec(), data).expect("extents")
                });
                self.acc(grads, *b, || {
                    let data = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    Tensor::new(av.shape().to_vec(), data).expect("extents")
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc(grads, *x, || Tensor::full(self.shape(*x), s));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = self.value(*gamma).len();
                let n = rstd.len();
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, || {
                    let mut dx = vec![0.0; n * d];
                    let mut dxhat = vec![0.0; d];
                    for i in 0..n {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            let v = gd[i * d + j] * gam[j];
                            dxhat[j] = v;
                            s1 += v;
                            s2 += v * xhat[i * d + j];
                        }
                        let c = rstd[i] / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = c * (d as f64 * dxhat[j] - s1 - xhat[i * d + j] * s2);
                        }
                    }
                    Tensor::new(vec![n, d], dx).expect("extents")
                });
                self.acc(grads, *gamma, || {
                    let mut dg = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += gd[i * d + j] * xhat[i * d + j];
                        }
                    }
                    Tensor::vector(dg)
                });
                self.acc(grads, *beta, || {
                    let mut db = vec![0.0; d];
                    for row in gd.chunks(d.max(1)) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    Tensor::vector(db)
                });
            }
            Op::Softmax(x) => self.acc(grads, *x, || {
                let d = value.last_dim().max(1);
                let mut dx = vec![0.0; value.len()];
                for ((y, gy), o) in value.data().chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        o[j] = y[j] * (gy[j] - dot);
                    }
                }
                Tensor::new(value.shape().to_vec(), dx).expect("extents")
            }),
            Op::LogSoftmax(x) => self.acc(grads, *x, || {
                let d = value.last_dim().max(1);
                let mut dx = vec![0.0; value.len()];
                for ((y, gy), o) in value.data().chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let s: f64 = gy.iter().sum();
                    for j in 0..d {
                        o[j] = gy[j] - y[j].exp() * s;
                    }
                }
                Tensor::new(value.shape().to_vec(), dx).expect("extents")
            }),
            Op::Gelu(x) => {
                let scale = match self.fault {
                    Some(Fault::GeluBackwardScale(s)) => s,
                    None => 1.0,
                };
                self.acc(grads, *x, || {
                    let xv = self.value(*x).data();
                    let data = xv.iter().zip(gd).map(|(&v, &gv)| gv * gelu_parts(v).1 * scale).collect();
                    Tensor::new(value.shape().to_vec(), data).expect("extents")
                })
            }
            Op::Embedding { table, ids } => self.acc(grads, *table, || {
                let mut dt = Tensor::zeros(self.shape(*table));
                let d = dt.last_dim();
                let data = dt.data_mut();
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        data[id * d + j] += gd[r * d + j];
                    }
                }
                dt
            }),
            Op::ConcatLastDim(a, b) => {
                let (n, da) = self.value(*a).dims2()?;
                let db = self.value(*b).last_dim();
                let w = da + db;
                self.acc(grads, *a, || {
                    let mut out = Vec::with_capacity(n * da);
                    for i in 0..n {
                        out.extend_from_slice(&gd[i * w..i * w + da]);
                    }
                    Tensor::new(vec![n, da], out).expect("extents")
                });
                self.acc(grads, *b, || {
                    let mut out = Vec::with_capacity(n * db);
                    for i in 0..n {
                        out.extend_from_slice(&gd[i * w + da..(i + 1) * w]);
                    }
                    Tensor::new(vec![n, db], out).expect("extents")
                });
            }
            Op::CrossEntropy { logits, targets, weights, total, probs } => self.acc(grads, *logits, || {
                let shape = self.shape(*logits).to_vec();
                let k = shape[1];
                let mut dl = vec![0.0; probs.len()];
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let c = gd[0] * w / total;
                    for j in 0..k {
                        dl[i * k + j] = c * probs[i * k + j];
                    }
                    dl[i * k + t] -= c;
                }
                Tensor::new(shape, dl).expect("extents")
            }),
            Op::Attention(cache) => self.attention_backward(cache, gd, grads),
            Op::ScatterRows { x, rows } => self.acc(grads, *x, || {
                let d = g.last_dim();
                let mut out = Vec::with_capacity(rows.len() * d);
                for &r in rows {
                    out.extend_from_slice(&gd[r * d..(r + 1) * d]);
                }
                Tensor::new(vec![rows.len(), d], out).expect("extents")
            }),
            Op::ReplaceRows { x, fill, rows } => {
                let d = g.last_dim();
                self.acc(grads, *x, || {
                    let mut dx = g.clone();
                    for &r in rows {
                        dx.data_mut()[r * d..(r + 1) * d].fill(0.0);
                    }
                    dx
                });
                self.acc(grads, *fill, || {
                    let mut df = vec![0.0; d];
                    for &r in rows {
                        for j in 0..d {
                            df[j] += gd[r * d + j];
                        }
                    }
                    Tensor::vector(df)
                });
            }
        }
        Ok(())
    }

    fn attention_backward(&self, c: &AttentionCache, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let qt = self.value(c.q);
        let (nq, d) = (qt.rows(), qt.last_dim());
        let nk = self.value(c.k).rows();
        let dh = d / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (qt.data(), self.value(c.k).data(), self.value(c.v).data());
        let mut dq = vec![0.0; nq * d];
        let mut dk = vec![0.0; nk * d];
        let mut dv = vec![0.0; nk * d];
        for (si, s) in c.segments.iter().enumerate() {
            let (ql, kl) = (s.q_len, s.kv_len);
            if ql == 0 || kl == 0 {
                continue;
            }
            for h in 0..c.heads {
                let p = &c.probs[si * c.heads + h];
                let off_q = s.q_start * d + h * dh;
                let off_k = s.kv_start * d + h * dh;
                // dV += P^T dO
                gemm(kl, ql, dh, 1.0, p, 1, kl, &gd[off_q..], d, 1, 1.0, &mut dv[off_k..], d, 1);
                // dP = dO V^T
                let mut dp = vec![0.0; ql * kl];
                gemm(ql, dh, kl, 1.0, &gd[off_q..], d, 1, &vv[off_k..], 1, d, 0.0, &mut dp, kl, 1);
                for i in 0..ql {
                    let pr = &p[i * kl..(i + 1) * kl];
                    let dr = &mut dp[i * kl..(i + 1) * kl];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    for j in 0..kl {
                        dr[j] = pr[j] * (dr[j] - dot) * scale;
                    }
                }
                // dQ += dS K ; dK += dS^T Q
                gemm(ql, kl, dh, 1.0, &dp, kl, 1, &kv[off_k..], d, 1, 1.0, &mut dq[off_q..], d, 1);
                gemm(kl, ql, dh, 1.0, &dp, 1, kl, &qv[off_q..], d, 1, 1.0, &mut dk[off_k..], d, 1);
            }
        }
        self.acc(grads, c.q, || Tensor::new(vec![nq, d], dq).expect("extents"));
        self.acc(grads, c.k, || Tensor::new(vec![nk, d], dk).expect("extents"));
        self.acc(grads, c.v, || Tensor::new(vec![nk, d], dv).expect("extents"));
    }
}
