//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Trainable tensors live in a [`Params`] store and enter a graph through
//! [`Graph::param`]; their gradients come back keyed by [`ParamId`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    MulScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId, usize),
    Concat(Vec<NodeId>, usize),
    Slice(NodeId, usize, usize),
    Transpose(NodeId),
    Embedding(NodeId, Vec<u32>),
    CrossEntropy(NodeId, Vec<u32>, Tensor),
    Sum(NodeId),
    MeanRows(NodeId),
    Norm(NodeId),
    ClampMax(NodeId, f64),
    Sqrt(NodeId),
    LstmCell(NodeId, NodeId, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a forward computation for one backward sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape(),
        right: b.shape(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    /// Drops every node created after `mark` (a previous [`Graph::len`]).
    pub fn truncate(&mut self, mark: usize) {
        self.nodes.truncate(mark);
        self.param_nodes.retain(|_, n| n.0 < mark);
    }

    /// Clears the tape so it can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_nodes.clear();
        self.backward_done = false;
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input. Receives a gradient but is not a parameter.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &Params, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(params.get(id).clone(), Op::Param);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(mismatch("matmul", va, vb));
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, va.data(), false, vb.data(), false, out.data_mut(), 0.0);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, name: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch(name, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(Tensor::from_vec(va.rows(), va.cols(), data).expect("same shape"))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds the `1 × n` row `bias` to every row of `a` (the only broadcast).
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(mismatch("add_row", va, vb));
        }
        let mut out = va.clone();
        let n = va.cols();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, bias)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x += c);
        self.push(out, Op::AddConst(a))
    }

    fn expect_scalar(&self, op: &'static str, a: NodeId, s: NodeId) -> Result<f64> {
        let vs = self.value(s);
        if vs.shape() != [1, 1] {
            return Err(mismatch(op, self.value(a), vs));
        }
        Ok(vs.item())
    }

    /// `s · a` for a `1 × 1` node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.expect_scalar("mul_scalar", a, s)?;
        let mut out = self.value(a).clone();
        out.scale_assign(sv);
        Ok(self.push(out, Op::MulScalar(a, s)))
    }

    /// `a / s` for a `1 × 1` node `s`.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.expect_scalar("div_scalar", a, s)?;
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x /= sv);
        Ok(self.push(out, Op::DivScalar(a, s)))
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        Tensor::from_vec(va.rows(), va.cols(), data).expect("same shape")
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, f64::tanh);
        self.push(t, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let t = self.map(a, f64::sqrt);
        self.push(t, Op::Sqrt(a))
    }

    /// Elementwise `min(a, c)`; the gradient is passed only where `a < c`.
    pub fn clamp_max(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = self.map(a, |x| x.min(c));
        self.push(t, Op::ClampMax(a, c))
    }

    /// Softmax along `axis` (1: within each row, 0: within each column).
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let va = self.value(a);
        let out = match axis {
            1 => softmax_rows(va),
            0 => transpose(&softmax_rows(&transpose(va))),
            _ => return Err(Error::InvalidArgument(format!("softmax axis {axis}"))),
        };
        Ok(self.push(out, Op::Softmax(a, axis)))
    }

    /// Concatenates along `axis` (0: stack rows, 1: join columns).
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Empty("concat operands"));
        }
        let first = self.value(parts[0]);
        let out = match axis {
            0 => {
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.cols() != cols {
                        return Err(mismatch("concat", self.value(parts[0]), v));
                    }
                    rows += v.rows();
                    data.extend_from_slice(v.data());
                }
                Tensor::from_vec(rows, cols, data)?
            }
            1 => {
                let rows = first.rows();
                let mut cols = 0;
                for &p in parts {
                    let v = self.value(p);
                    if v.rows() != rows {
                        return Err(mismatch("concat", self.value(parts[0]), v));
                    }
                    cols += v.cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(r));
                    }
                }
                Tensor::from_vec(rows, cols, data)?
            }
            _ => return Err(Error::InvalidArgument(format!("concat axis {axis}"))),
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis)))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let va = self.value(a);
        let out = match axis {
            0 if start + len <= va.rows() => Tensor::from_vec(
                len,
                va.cols(),
                va.data()[start * va.cols()..(start + len) * va.cols()].to_vec(),
            )?,
            1 if start + len <= va.cols() => {
                let mut data = Vec::with_capacity(va.rows() * len);
                for r in 0..va.rows() {
                    data.extend_from_slice(&va.row_slice(r)[start..start + len]);
                }
                Tensor::from_vec(va.rows(), len, data)?
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "slice axis {axis} [{start}, {}) of shape {:?}",
                    start + len,
                    va.shape()
                )))
            }
        };
        Ok(self.push(out, Op::Slice(a, axis, start)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let t = transpose(self.value(a));
        self.push(t, Op::Transpose(a))
    }

    /// Rows of `table` selected by `ids`, as a `len × d` matrix.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let vt = self.value(table);
        let d = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= vt.rows() {
                return Err(Error::TokenOutOfRange {
                    id,
                    size: vt.rows(),
                });
            }
            data.extend_from_slice(vt.row_slice(id as usize));
        }
        let out = Tensor::from_vec(ids.len(), d, data)?;
        Ok(self.push(out, Op::Embedding(table, ids.to_vec())))
    }

    /// Per-row negative log-likelihood `−log softmax(logits)[target]`, as an
    /// `n × 1` column.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> Result<NodeId> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {} targets for {} rows",
                targets.len(),
                vl.rows()
            )));
        }
        let probs = softmax_rows(vl);
        let v = vl.cols();
        let mut nll = Vec::with_capacity(targets.len());
        for (r, &t) in targets.iter().enumerate() {
            if t as usize >= v {
                return Err(Error::TokenOutOfRange { id: t, size: v });
            }
            let row = vl.row_slice(r);
            nll.push(log_sum_exp(row) - row[t as usize]);
        }
        let out = Tensor::from_vec(targets.len(), 1, nll)?;
        Ok(self.push(out, Op::CrossEntropy(logits, targets.to_vec(), probs)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut out = Tensor::zeros(1, va.cols());
        let inv = 1.0 / va.rows() as f64;
        for r in 0..va.rows() {
            for (o, x) in out.data_mut().iter_mut().zip(va.row_slice(r)) {
                *o += x * inv;
            }
        }
        self.push(out, Op::MeanRows(a))
    }

    /// Frobenius norm as a `1 × 1` node.
    pub fn norm(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).norm_sq().sqrt();
        self.push(Tensor::scalar(n), Op::Norm(a))
    }

    /// Fused LSTM cell. `pre` holds the `n × 4h` gate pre-activations in
    /// (input, forget, candidate, output) order; returns `n × 2h` holding the
    /// new hidden state followed by the new cell state.
    pub fn lstm_cell(&mut self, pre: NodeId, c_prev: NodeId) -> Result<NodeId> {
        let (vp, vc) = (self.value(pre), self.value(c_prev));
        let h = vc.cols();
        if vp.cols() != 4 * h || vp.rows() != vc.rows() {
            return Err(mismatch("lstm_cell", vp, vc));
        }
        let n = vp.rows();
        // saved per row: i, f, g, o, tanh(c)
        let mut saved = Tensor::zeros(n, 5 * h);
        let mut out = Tensor::zeros(n, 2 * h);
        for r in 0..n {
            let p = vp.row_slice(r);
            let cp = vc.row_slice(r);
            let s = &mut saved.data_mut()[r * 5 * h..(r + 1) * 5 * h];
            for j in 0..h {
                let i = sigmoid(p[j]);
                let f = sigmoid(p[h + j]);
                let g = p[2 * h + j].tanh();
                let o = sigmoid(p[3 * h + j]);
                let c = f * cp[j] + i * g;
                let tc = c.tanh();
                s[j] = i;
                s[h + j] = f;
                s[2 * h + j] = g;
                s[3 * h + j] = o;
                s[4 * h + j] = tc;
                out.data_mut()[r * 2 * h + j] = o * tc;
                out.data_mut()[r * 2 * h + h + j] = c;
            }
        }
        Ok(self.push(out, Op::LstmCell(pre, c_prev, saved)))
    }

    /// Reverse sweep from the scalar `loss`. May be called once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).shape() != [1, 1] {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .filter(|(_, n)| n.0 <= loss.0)
            .map(|(&p, &n)| (p, n))
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                // dA = G·Bᵀ ; dB = Aᵀ·G
                let ga = acc(grads, *a, va);
                gemm(m, n, k, g.data(), false, vb.data(), true, ga.data_mut(), 1.0);
                let gb = acc(grads, *b, vb);
                gemm(k, m, n, va.data(), true, g.data(), false, gb.data_mut(), 1.0);
            }
            Op::Add(a, b) => {
                acc(grads, *a, out).add_assign(g);
                acc(grads, *b, out).add_assign(g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, out).add_assign(g);
                let gb = acc(grads, *b, out);
                for (x, y) in gb.data_mut().iter_mut().zip(g.data()) {
                    *x -= y;
                }
            }
            Op::AddRow(a, b) => {
                acc(grads, *a, out).add_assign(g);
                let gb = acc(grads, *b, self.value(*b));
                for row in g.data().chunks_exact(g.cols()) {
                    for (x, y) in gb.data_mut().iter_mut().zip(row) {
                        *x += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = acc(grads, *a, va);
                for ((x, gi), bi) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                    *x += gi * bi;
                }
                let gb = acc(grads, *b, vb);
                for ((x, gi), ai) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    *x += gi * ai;
                }
            }
            Op::Scale(a, s) => {
                let ga = acc(grads, *a, out);
                for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x += s * gi;
                }
            }
            Op::AddConst(a) => acc(grads, *a, out).add_assign(g),
            Op::MulScalar(a, s) => {
                let (va, sv) = (self.value(*a), self.value(*s).item());
                let dot: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                let ga = acc(grads, *a, va);
                for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x += sv * gi;
                }
                acc(grads, *s, self.value(*s)).data_mut()[0] += dot;
            }
            Op::DivScalar(a, s) => {
                let (va, sv) = (self.value(*a), self.value(*s).item());
                let dot: f64 = g.data().iter().zip(va.data()).map(|(x, y)| x * y).sum();
                let ga = acc(grads, *a, va);
                for (x, gi) in ga.data_mut().iter_mut().zip(g.data()) {
                    *x += gi / sv;
                }
                acc(grads, *s, self.value(*s)).data_mut()[0] -= dot / (sv * sv);
            }
            Op::Tanh(a) => {
                let ga = acc(grads, *a, out);
                for ((x, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x += gi * (1.0 - y * y);
                }
            }
            Op::Sigmoid(a) => {
                let ga = acc(grads, *a, out);
                for ((x, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    *x += gi * y * (1.0 - y);
                }
            }
            Op::Sqrt(a) => {
                let ga = acc(grads, *a, out);
                for ((x, gi), y) in ga.data_mut().iter_mut().zip(g.data()).zip(out.data()) {
                    if *y > 0.0 {
                        *x += gi * 0.5 / y;
                    }
                }
            }
            Op::ClampMax(a, c) => {
                let va = self.value(*a);
                let ga = acc(grads, *a, va);
                for ((x, gi), ai) in ga.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                    if ai < c {
                        *x += gi;
                    }
                }
            }
            Op::Softmax(a, axis) => {
                let (y, gg) = if *axis == 1 {
                    (out.clone(), g.clone())
                } else {
                    (transpose(out), transpose(g))
                };
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                let n = y.cols();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(r), gg.row_slice(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx.data_mut()[r * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                let dx = if *axis == 1 { dx } else { transpose(&dx) };
                acc(grads, *a, out).add_assign(&dx);
            }
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for p in parts {
                    let vp = self.value(*p);
                    let gp = acc(grads, *p, vp);
                    if *axis == 0 {
                        let len = vp.len();
                        for (x, y) in gp.data_mut().iter_mut().zip(&g.data()[offset..offset + len]) {
                            *x += y;
                        }
                        offset += len;
                    } else {
                        let w = vp.cols();
                        for r in 0..vp.rows() {
                            let src = &g.row_slice(r)[offset..offset + w];
                            for (x, y) in gp.data_mut()[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                        offset += w;
                    }
                }
            }
            Op::Slice(a, axis, start) => {
                let va = self.value(*a);
                let ga = acc(grads, *a, va);
                if *axis == 0 {
                    let off = start * va.cols();
                    for (x, y) in ga.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
                        *x += y;
                    }
                } else {
                    let (w, cols) = (g.cols(), va.cols());
                    for r in 0..g.rows() {
                        let dst = &mut ga.data_mut()[r * cols + start..r * cols + start + w];
                        for (x, y) in dst.iter_mut().zip(g.row_slice(r)) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Transpose(a) => acc(grads, *a, self.value(*a)).add_assign(&transpose(g)),
            Op::Embedding(table, ids) => {
                let vt = self.value(*table);
                let d = vt.cols();
                let gt = acc(grads, *table, vt);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id as usize * d..(id as usize + 1) * d];
                    for (x, y) in dst.iter_mut().zip(g.row_slice(r)) {
                        *x += y;
                    }
                }
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let gl = acc(grads, *logits, probs);
                let v = probs.cols();
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.data()[r];
                    let dst = &mut gl.data_mut()[r * v..(r + 1) * v];
                    for (x, p) in dst.iter_mut().zip(probs.row_slice(r)) {
                        *x += gr * p;
                    }
                    dst[t as usize] -= gr;
                }
            }
            Op::Sum(a) => {
                let gv = g.item();
                let ga = acc(grads, *a, self.value(*a));
                ga.data_mut().iter_mut().for_each(|x| *x += gv);
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let inv = 1.0 / va.rows() as f64;
                let ga = acc(grads, *a, va);
                for row in ga.data_mut().chunks_exact_mut(va.cols()) {
                    for (x, y) in row.iter_mut().zip(g.data()) {
                        *x += y * inv;
                    }
                }
            }
            Op::Norm(a) => {
                let n = out.item();
                if n > 0.0 {
                    let va = self.value(*a);
                    let s = g.item() / n;
                    let ga = acc(grads, *a, va);
                    for (x, y) in ga.data_mut().iter_mut().zip(va.data()) {
                        *x += s * y;
                    }
                }
            }
            Op::LstmCell(pre, c_prev, saved) => {
                let vc = self.value(*c_prev);
                let h = vc.cols();
                let n = vc.rows();
                let mut dpre = Tensor::zeros(n, 4 * h);
                let mut dcp = Tensor::zeros(n, h);
                for r in 0..n {
                    let s = saved.row_slice(r);
                    let cp = vc.row_slice(r);
                    let gr = g.row_slice(r);
                    let dp = &mut dpre.data_mut()[r * 4 * h..(r + 1) * 4 * h];
                    let dc_row = &mut dcp.data_mut()[r * h..(r + 1) * h];
                    for j in 0..h {
                        let (i, f, gg, o, tc) = (s[j], s[h + j], s[2 * h + j], s[3 * h + j], s[4 * h + j]);
                        let dh = gr[j];
                        let dc = gr[h + j] + dh * o * (1.0 - tc * tc);
                        dp[j] = dc * gg * i * (1.0 - i);
                        dp[h + j] = dc * cp[j] * f * (1.0 - f);
                        dp[2 * h + j] = dc * i * (1.0 - gg * gg);
                        dp[3 * h + j] = dh * tc * o * (1.0 - o);
                        dc_row[j] = dc * f;
                    }
                }
                acc(grads, *pre, &dpre).add_assign(&dpre);
                acc(grads, *c_prev, &dcp).add_assign(&dcp);
            }
        }
    }
}

fn acc<'g>(grads: &'g mut [Option<Tensor>], id: NodeId, like: &Tensor) -> &'g mut Tensor {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(like.rows(), like.cols()))
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let n = t.cols();
    for row in out.data_mut().chunks_exact_mut(n) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for x in row.iter_mut() {
            *x = (*x - m).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x /= s;
        }
    }
    out
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::from_vec(c, r, data).expect("transpose shape")
}

/// Result of one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// Gradient with respect to any recorded node (`None` if unreached).
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(Option::as_ref)
    }

    /// Gradient for a parameter; `None` if it did not influence the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.wrt(*n))
    }

    /// Gradients of every parameter that influenced the loss.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, n)| self.wrt(n).map(|g| (p, g)))
    }

    /// Adds every parameter gradient into `dense` (indexed by `ParamId`).
    pub fn accumulate_into(&self, dense: &mut [Tensor]) {
        for &(p, n) in &self.params {
            if let Some(g) = self.wrt(n) {
                dense[p.0].add_assign(g);
            }
        }
    }

    /// Dense per-parameter gradients; unreached parameters get zeros.
    pub fn to_dense(&self, params: &Params) -> Vec<Tensor> {
        let mut dense: Vec<Tensor> = params
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        self.accumulate_into(&mut dense);
        dense
    }
}
