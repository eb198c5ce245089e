use std::borrow::Cow;
use std::collections::HashMap;
use std::fmt;

use super::{gemm, log_sum_exp, sigmoid, MatMut, MatRef, Tensor};
use crate::error::{Error, Result};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous run of rows that forms one independent causal sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// What a hook sees when the backward sweep reaches its node.
pub struct HookEvent<'e> {
    pub node: NodeId,
    pub activation: &'e Tensor,
    pub grad: &'e [f64],
}

type Hook<'a> = Box<dyn FnMut(&HookEvent<'_>) + 'a>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    RmsNorm {
        x: NodeId,
        weight: NodeId,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: Vec<Segment>,
        // per segment, per head: len x len row-major, zero above the diagonal
        probs: Vec<Vec<f64>>,
    },
    ScaleColumns {
        x: NodeId,
        factors: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording of a forward computation, replayable in reverse.
///
/// Nodes are appended in execution order, so parents always precede children
/// and a single reverse sweep visits every node exactly once.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    hooks: HashMap<NodeId, Vec<Hook<'a>>>,
    check_finite: bool,
}

impl fmt::Debug for Tape<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("hooks", &self.hooks.len())
            .field("check_finite", &self.check_finite)
            .finish()
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            hooks: HashMap::new(),
            check_finite: true,
        }
    }

    /// Toggle NaN/Inf detection at op boundaries (on by default).
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
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

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Marks an existing node as differentiable. Only nodes created afterwards
    /// inherit the flag.
    pub fn watch(&mut self, id: NodeId) {
        self.nodes[id.0].requires_grad = true;
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn register_hook(&mut self, id: NodeId, hook: impl FnMut(&HookEvent<'_>) + 'a) {
        self.hooks.entry(id).or_default().push(Box::new(hook));
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<NodeId> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
            grad: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Owned leaf; differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<NodeId> {
        let rg = tensor.requires_grad();
        self.push("leaf", tensor, Op::Leaf, rg)
    }

    /// Borrowed leaf, typically a model parameter.
    pub fn param(&mut self, tensor: &'a Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(tensor),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = expect_2d("matmul", self.value(a))?;
        let (k2, n) = expect_2d("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            1.0,
            MatRef::new(self.value(a).data(), m, k),
            MatRef::new(self.value(b).data(), k, n),
            0.0,
            MatMut::new(&mut out, m, n),
        );
        let rg = self.rg(&[a, b]);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push("add", Tensor::new(shape, out)?, Op::Add(a, b), rg)
    }

    /// Adds a vector to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let cols = self.value(x).cols();
        if self.value(row).len() != cols {
            return Err(Error::shape(
                "add_row",
                format!("row of {} values for {} columns", self.value(row).len(), cols),
            ));
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(cols.max(1)) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, row]);
        self.push("add_row", Tensor::new(shape, out)?, Op::AddRow(x, row), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        self.push("mul", Tensor::new(shape, out)?, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("scale", Tensor::new(shape, out)?, Op::Scale(x, c), rg)
    }

    pub fn silu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(x).data().iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("silu", Tensor::new(shape, out)?, Op::Silu(x), rg)
    }

    /// Row-wise `x / sqrt(mean(x^2) + eps) * weight`.
    pub fn rmsnorm(&mut self, x: NodeId, weight: NodeId, eps: f64) -> Result<NodeId> {
        let cols = self.value(x).cols();
        if self.value(weight).len() != cols {
            return Err(Error::shape(
                "rmsnorm",
                format!("weight has {} values for width {}", self.value(weight).len(), cols),
            ));
        }
        if !(eps >= 0.0) {
            return Err(Error::Invalid(format!("rmsnorm eps must be >= 0, got {eps}")));
        }
        let xv = self.value(x).data();
        let w = self.value(weight).data();
        let rows = self.value(x).rows();
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, v), g) in out[r * cols..(r + 1) * cols].iter_mut().zip(row).zip(w) {
                *o = v * inv * g;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x, weight]);
        self.push(
            "rmsnorm",
            Tensor::new(shape, out)?,
            Op::RmsNorm { x, weight, inv_rms },
            rg,
        )
    }

    /// Gathers rows of `table` (shape `[V, d]`).
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = expect_2d("embedding", self.value(table))?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::shape("embedding", format!("index {id} out of range {v}")));
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Multi-head causal self-attention over packed rows. Each segment attends
    /// only within itself; `q`, `k`, `v` are `[N, d]` with heads laid out as
    /// contiguous column blocks.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Segment],
    ) -> Result<NodeId> {
        let (n, d) = expect_2d("attention", self.value(q))?;
        if self.value(k).shape() != [n, d] || self.value(v).shape() != [n, d] {
            return Err(Error::shape("attention", "q, k, v shapes differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("{d} not divisible by {heads} heads")));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(Error::shape("attention", "segments must tile the rows in order"));
            }
            covered += s.len;
        }
        if covered != n {
            return Err(Error::shape("attention", format!("segments cover {covered} of {n} rows")));
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut scores = Vec::new();
        for s in segments {
            for h in 0..heads {
                let mut p = vec![0.0; s.len * s.len];
                for i in 0..s.len {
                    let qi = &qv[(s.start + i) * d + h * hd..][..hd];
                    scores.clear();
                    for j in 0..=i {
                        let kj = &kv[(s.start + j) * d + h * hd..][..hd];
                        scores.push(dot(qi, kj) * scale);
                    }
                    let lse = log_sum_exp(&scores);
                    let row = &mut p[i * s.len..i * s.len + i + 1];
                    for (pj, sc) in row.iter_mut().zip(&scores) {
                        *pj = (sc - lse).exp();
                    }
                    let oi = &mut out[(s.start + i) * d + h * hd..][..hd];
                    for j in 0..=i {
                        let w = p[i * s.len + j];
                        let vj = &vv[(s.start + j) * d + h * hd..][..hd];
                        for (o, x) in oi.iter_mut().zip(vj) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        self.push(
            "attention",
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Multiplies column `j` of `x` by the constant `factors[j]`.
    pub fn scale_columns(&mut self, x: NodeId, factors: Vec<f64>) -> Result<NodeId> {
        let cols = self.value(x).cols();
        if factors.len() != cols {
            return Err(Error::shape(
                "scale_columns",
                format!("{} factors for {} columns", factors.len(), cols),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(cols.max(1)) {
            for (o, f) in chunk.iter_mut().zip(&factors) {
                *o *= f;
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(&[x]);
        self.push("scale_columns", Tensor::new(shape, out)?, Op::ScaleColumns { x, factors }, rg)
    }

    /// Mean token cross-entropy over the positions where `loss_mask` is set.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        loss_mask: &[bool],
    ) -> Result<NodeId> {
        if loss_mask.len() != targets.len() {
            return Err(Error::shape("cross_entropy", "mask and targets differ in length"));
        }
        let count = loss_mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: no supervised positions".into()));
        }
        let w = 1.0 / count as f64;
        let weights: Vec<f64> = loss_mask.iter().map(|&m| if m { w } else { 0.0 }).collect();
        self.weighted_cross_entropy(logits, targets, &weights)
    }

    /// `sum_t weights[t] * -log softmax(logits[t])[targets[t]]`; positions with
    /// zero weight are skipped entirely.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let (t, v) = expect_2d("cross_entropy", self.value(logits))?;
        if targets.len() != t || weights.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{t} rows but {} targets / {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(bad) = targets.iter().zip(weights).find(|(y, w)| **w != 0.0 && **y >= v) {
            return Err(Error::shape("cross_entropy", format!("target {} >= vocab {v}", bad.0)));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut loss = 0.0;
        for r in 0..t {
            if weights[r] == 0.0 {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            loss += weights[r] * (lse - row[targets[r]]);
            for (p, x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Reverse sweep from a scalar root. Gradients accumulate into every
    /// differentiable ancestor; call [`Tape::zero_grad`] between sweeps to
    /// start fresh.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {:?}", self.value(root).shape()),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        {
            let g = self.nodes[root.0].grad.get_or_insert_with(|| vec![0.0]);
            g[0] += 1.0;
        }
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if self.check_finite && g.iter().any(|v| !v.is_finite()) {
                self.nodes[i].grad = Some(g);
                return Err(Error::NonFinite { op: "backward" });
            }
            if let Some(hooks) = self.hooks.get_mut(&NodeId(i)) {
                let event = HookEvent {
                    node: NodeId(i),
                    activation: &self.nodes[i].value,
                    grad: &g,
                };
                for h in hooks.iter_mut() {
                    h(&event);
                }
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(&op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        let n = &mut self.nodes[id.0];
        if !n.requires_grad {
            return None;
        }
        Some(n.grad.take().unwrap_or_else(|| vec![0.0; n.value.len()]))
    }

    fn put_grad(&mut self, id: NodeId, g: Vec<f64>) {
        self.nodes[id.0].grad = Some(g);
    }

    fn propagate(&mut self, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                if let Some(mut ga) = self.take_grad(*a) {
                    gemm(
                        1.0,
                        MatRef::new(g, m, n),
                        MatRef::new(self.value(*b).data(), k, n).t(),
                        1.0,
                        MatMut::new(&mut ga, m, k),
                    );
                    self.put_grad(*a, ga);
                }
                if let Some(mut gb) = self.take_grad(*b) {
                    gemm(
                        1.0,
                        MatRef::new(self.value(*a).data(), m, k).t(),
                        MatRef::new(g, m, n),
                        1.0,
                        MatMut::new(&mut gb, k, n),
                    );
                    self.put_grad(*b, gb);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(mut gx) = self.take_grad(id) {
                        axpy(&mut gx, 1.0, g);
                        self.put_grad(id, gx);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(mut gx) = self.take_grad(*x) {
                    axpy(&mut gx, 1.0, g);
                    self.put_grad(*x, gx);
                }
                if let Some(mut gr) = self.take_grad(*row) {
                    let cols = gr.len();
                    for chunk in g.chunks(cols.max(1)) {
                        axpy(&mut gr, 1.0, chunk);
                    }
                    self.put_grad(*row, gr);
                }
            }
            Op::Mul(a, b) => {
                if let Some(mut ga) = self.take_grad(*a) {
                    for ((o, gi), bv) in ga.iter_mut().zip(g).zip(self.value(*b).data()) {
                        *o += gi * bv;
                    }
                    self.put_grad(*a, ga);
                }
                if let Some(mut gb) = self.take_grad(*b) {
                    for ((o, gi), av) in gb.iter_mut().zip(g).zip(self.value(*a).data()) {
                        *o += gi * av;
                    }
                    self.put_grad(*b, gb);
                }
            }
            Op::Scale(x, c) => {
                if let Some(mut gx) = self.take_grad(*x) {
                    axpy(&mut gx, *c, g);
                    self.put_grad(*x, gx);
                }
            }
            Op::Silu(x) => {
                if let Some(mut gx) = self.take_grad(*x) {
                    for ((o, gi), &xv) in gx.iter_mut().zip(g).zip(self.value(*x).data()) {
                        let s = sigmoid(xv);
                        *o += gi * s * (1.0 + xv * (1.0 - s));
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let cols = self.value(*x).cols();
                if let Some(mut gx) = self.take_grad(*x) {
                    let xv = self.value(*x).data();
                    let w = self.value(*weight).data();
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot_gwx: f64 = gr.iter().zip(w).zip(row).map(|((a, b), c)| a * b * c).sum();
                        let coef = inv * inv * inv * dot_gwx / cols as f64;
                        for (((o, gi), wi), xi) in gx[r * cols..(r + 1) * cols].iter_mut().zip(gr).zip(w).zip(row) {
                            *o += inv * gi * wi - xi * coef;
                        }
                    }
                    self.put_grad(*x, gx);
                }
                if let Some(mut gw) = self.take_grad(*weight) {
                    let xv = self.value(*x).data();
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        for ((o, gi), xi) in gw.iter_mut().zip(gr).zip(row) {
                            *o += gi * xi * inv;
                        }
                    }
                    self.put_grad(*weight, gw);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(mut gt) = self.take_grad(*table) {
                    let d = self.value(*table).cols();
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * d..(id + 1) * d], 1.0, &g[r * d..(r + 1) * d]);
                    }
                    self.put_grad(*table, gt);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, segments, probs, g),
            Op::ScaleColumns { x, factors } => {
                if let Some(mut gx) = self.take_grad(*x) {
                    let cols = factors.len();
                    for (o, gc) in gx.chunks_mut(cols.max(1)).zip(g.chunks(cols.max(1))) {
                        for ((oi, gi), f) in o.iter_mut().zip(gc).zip(factors) {
                            *oi += gi * f;
                        }
                    }
                    self.put_grad(*x, gx);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if let Some(mut gl) = self.take_grad(*logits) {
                    let v = self.value(*logits).cols();
                    let g0 = g[0];
                    for (r, (&y, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (o, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o += g0 * w * p;
                        }
                        row[y] -= g0 * w;
                    }
                    self.put_grad(*logits, gl);
                }
            }
            Op::Sum(x) => {
                if let Some(mut gx) = self.take_grad(*x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                    self.put_grad(*x, gx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        segments: &[Segment],
        probs: &[Vec<f64>],
        g: &[f64],
    ) {
        let d = self.value(q).cols();
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut gq = self.take_grad(q);
        let mut gk = self.take_grad(k);
        let mut gv = self.take_grad(v);
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dscore = Vec::new();
        for (si, s) in segments.iter().enumerate() {
            for h in 0..heads {
                let p = &probs[si * heads + h];
                for i in 0..s.len {
                    let gi = &g[(s.start + i) * d + h * hd..][..hd];
                    // dP_ij = g_i . v_j, then softmax backward
                    dscore.clear();
                    let mut weighted = 0.0;
                    for j in 0..=i {
                        let vj = &vv[(s.start + j) * d + h * hd..][..hd];
                        let dp = dot(gi, vj);
                        weighted += p[i * s.len + j] * dp;
                        dscore.push(dp);
                    }
                    for (j, ds) in dscore.iter_mut().enumerate() {
                        *ds = p[i * s.len + j] * (*ds - weighted) * scale;
                    }
                    if let Some(gv) = gv.as_mut() {
                        for j in 0..=i {
                            let w = p[i * s.len + j];
                            axpy(&mut gv[(s.start + j) * d + h * hd..][..hd], w, gi);
                        }
                    }
                    if let Some(gq) = gq.as_mut() {
                        let out = &mut gq[(s.start + i) * d + h * hd..][..hd];
                        for (j, ds) in dscore.iter().enumerate() {
                            axpy(out, *ds, &kv[(s.start + j) * d + h * hd..][..hd]);
                        }
                    }
                    if let Some(gk) = gk.as_mut() {
                        let qi = &qv[(s.start + i) * d + h * hd..][..hd];
                        for (j, ds) in dscore.iter().enumerate() {
                            axpy(&mut gk[(s.start + j) * d + h * hd..][..hd], *ds, qi);
                        }
                    }
                }
            }
        }
        if let Some(x) = gq {
            self.put_grad(q, x);
        }
        if let Some(x) = gk {
            self.put_grad(k, x);
        }
        if let Some(x) = gv {
            self.put_grad(v, x);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}
