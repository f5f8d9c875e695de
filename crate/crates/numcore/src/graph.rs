//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its forward value, so node indices are a
//! topological order and `backward` is a single reverse sweep. Nodes whose
//! inputs carry no gradient requirement are recorded as constants and are
//! skipped by the sweep.

use crate::error::{Result, TensorError};
use crate::tensor::{
    axis_blocks, broadcast_index_map, broadcast_shape, matmul_at_acc, matmul_bt_acc, matmul_raw,
    numel, transpose_raw, Tensor,
};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Powf(Var, f64),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    SumAxis(Var, usize),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    match t.first_non_finite() {
        Some(index) => Err(TensorError::NonFinite { op, index }),
        None => Ok(()),
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::Axis { op, axis, rank });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, &value)?;
        Ok(self.push(value, op, requires_grad))
    }

    /// Leaf that gradients flow into.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf without gradient tracking. Values may include -inf (attention masks).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Copy of `v`'s value with no gradient path back to it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
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

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(name, &sa, &sb)?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, Tensor::new(out_shape, data)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let t = self.value(a).map(f);
        let rg = self.rg(a);
        self.push_checked(name, t, op, rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary("neg", a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("scale", a, |x| k * x, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + k, Op::AddScalar(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        self.unary("powf", a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("matmul", Tensor::new(vec![m, n], data)?, Op::Matmul(a, b), rg)
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: s.len(),
            });
        }
        let data = transpose_raw(self.value(a).data(), s[0], s[1]);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![s[1], s[0]], data)?, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let out = broadcast_shape("broadcast", &s, shape)?;
        if out != shape {
            return Err(TensorError::Dimension {
                op: "broadcast",
                lhs: s,
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_index_map(&s, shape);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out, data)?, Op::BroadcastTo(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_blocks(&base, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat(parts.to_vec(), axis),
            rg,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("narrow", axis, s.len())?;
        if start + len > s[axis] {
            return Err(TensorError::Index {
                op: "narrow",
                index: start + len,
                extent: s[axis],
            });
        }
        let (outer, ext, inner) = axis_blocks(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = s;
        out_shape[axis] = len;
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Narrow(a, axis, start), rg))
    }

    /// Selects rows (entries along axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("gather_rows", 0, s.len())?;
        let row = numel(&s[1..]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= s[0] {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: s[0],
                });
            }
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = s;
        out_shape[0] = indices.len();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::GatherRows(a, indices.to_vec()),
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).sum();
        let rg = self.rg(a);
        self.push_checked("sum", Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::Contract("mean of empty tensor".into()));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis("sum_axis", axis, s.len())?;
        let (outer, ext, inner) = axis_blocks(&s, axis);
        let src = self.value(a).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..ext {
                let base = (o * ext + e) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[base + i];
                }
            }
        }
        let mut out_shape = s;
        out_shape[axis] = 1;
        let rg = self.rg(a);
        self.push_checked("sum_axis", Tensor::new(out_shape, data)?, Op::SumAxis(a, axis), rg)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.sum_axis(a, axis)?;
        let ext = self.shape(a)[axis];
        self.scale(s, 1.0 / ext as f64)
    }

    /// Softmax along `axis`, stabilized by per-slice max subtraction.
    ///
    /// `mask` is an additive constant over {0, -inf} broadcastable to `a`.
    /// Masked entries come out as exactly 0. A slice with every entry masked
    /// is an error.
    pub fn softmax(&mut self, a: Var, axis: usize, mask: Option<&Tensor>) -> Result<Var> {
        let y = softmax_forward(self.value(a), axis, mask, false)?;
        let rg = self.rg(a);
        self.push_checked("softmax", y, Op::Softmax(a, axis), rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let y = softmax_forward(self.value(a), axis, None, true)?;
        let rg = self.rg(a);
        self.push_checked("log_softmax", y, Op::LogSoftmax(a, axis), rg)
    }

    /// Per-row layer normalization over the last axis (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let last = self.shape(a).len().checked_sub(1).ok_or(TensorError::Axis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        let mu = self.mean_axis(a, last)?;
        let centered = self.sub(a, mu)?;
        let sq = self.mul(centered, centered)?;
        let var = self.mean_axis(sq, last)?;
        let var = self.add_scalar(var, eps)?;
        let inv = self.powf(var, -0.5)?;
        self.mul(centered, inv)
    }

    /// `x W + b` for `x: [n, d_in]`, `w: [d_in, d_out]`, `b: [d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Accumulates d(root)/d(leaf) into every gradient-tracking leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rs = self.shape(root);
        if numel(rs) != 1 {
            return Err(TensorError::NonScalarRoot(rs.to_vec()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if let Op::Leaf = op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(t) => {
                        for (x, y) in t.data_mut().iter_mut().zip(&g) {
                            *x += y;
                        }
                    }
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(i, &op, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        op: &Op,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
    ) -> Result<()> {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let len = |v: Var| self.nodes[v.0].value.len();
        let want = |v: Var| self.nodes[v.0].requires_grad;
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(a, 1.0), (b, sign)] {
                    if want(v) {
                        let map = broadcast_index_map(val(v).shape(), out.shape());
                        accumulate(&mut adj[v.0], len(v), |buf| {
                            for (k, &m) in map.iter().enumerate() {
                                buf[m] += s * g[k];
                            }
                        });
                    }
                }
            }
            Op::Mul(a, b) => {
                let ma = broadcast_index_map(val(a).shape(), out.shape());
                let mb = broadcast_index_map(val(b).shape(), out.shape());
                let (da, db) = (val(a).data(), val(b).data());
                if want(a) {
                    accumulate(&mut adj[a.0], len(a), |buf| {
                        for k in 0..g.len() {
                            buf[ma[k]] += g[k] * db[mb[k]];
                        }
                    });
                }
                if want(b) {
                    accumulate(&mut adj[b.0], len(b), |buf| {
                        for k in 0..g.len() {
                            buf[mb[k]] += g[k] * da[ma[k]];
                        }
                    });
                }
            }
            Op::Div(a, b) => {
                let ma = broadcast_index_map(val(a).shape(), out.shape());
                let mb = broadcast_index_map(val(b).shape(), out.shape());
                let (da, db) = (val(a).data(), val(b).data());
                if want(a) {
                    accumulate(&mut adj[a.0], len(a), |buf| {
                        for k in 0..g.len() {
                            buf[ma[k]] += g[k] / db[mb[k]];
                        }
                    });
                }
                if want(b) {
                    accumulate(&mut adj[b.0], len(b), |buf| {
                        for k in 0..g.len() {
                            let y = db[mb[k]];
                            buf[mb[k]] -= g[k] * da[ma[k]] / (y * y);
                        }
                    });
                }
            }
            Op::Neg(a) => self.unary_back(a, g, adj, |_, _| -1.0),
            Op::Scale(a, k) => self.unary_back(a, g, adj, |_, _| k),
            Op::AddScalar(a) | Op::Reshape(a) => self.unary_back(a, g, adj, |_, _| 1.0),
            Op::Abs(a) => self.unary_back(a, g, adj, |x, _| {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Relu(a) => self.unary_back(a, g, adj, |x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Exp(a) => self.unary_back_out(a, out, g, adj, |_, y| y),
            Op::Log(a) => self.unary_back(a, g, adj, |x, _| 1.0 / x),
            Op::Sigmoid(a) => self.unary_back_out(a, out, g, adj, |_, y| y * (1.0 - y)),
            Op::Tanh(a) => self.unary_back_out(a, out, g, adj, |_, y| 1.0 - y * y),
            Op::Powf(a, p) => self.unary_back(a, g, adj, |x, _| p * x.powf(p - 1.0)),
            Op::Matmul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if want(a) {
                    accumulate(&mut adj[a.0], m * k, |buf| {
                        matmul_bt_acc(buf, g, val(b).data(), m, n, k)
                    });
                }
                if want(b) {
                    accumulate(&mut adj[b.0], k * n, |buf| {
                        matmul_at_acc(buf, val(a).data(), g, m, k, n)
                    });
                }
            }
            Op::Transpose(a) => {
                let s = val(a).shape();
                let t = transpose_raw(g, s[1], s[0]);
                accumulate(&mut adj[a.0], t.len(), |buf| {
                    for (x, y) in buf.iter_mut().zip(&t) {
                        *x += y;
                    }
                });
            }
            Op::BroadcastTo(a) => {
                let map = broadcast_index_map(val(a).shape(), out.shape());
                accumulate(&mut adj[a.0], len(a), |buf| {
                    for (k, &m) in map.iter().enumerate() {
                        buf[m] += g[k];
                    }
                });
            }
            Op::Concat(ref parts, axis) => {
                let (outer, total, inner) = axis_blocks(out.shape(), axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = val(p).shape()[axis];
                    if want(p) {
                        accumulate(&mut adj[p.0], len(p), |buf| {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * ext * inner;
                                for k in 0..ext * inner {
                                    buf[dst + k] += g[src + k];
                                }
                            }
                        });
                    }
                    offset += ext;
                }
            }
            Op::Narrow(a, axis, start) => {
                let (outer, ext, inner) = axis_blocks(val(a).shape(), axis);
                let n = out.shape()[axis];
                accumulate(&mut adj[a.0], len(a), |buf| {
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        let src = o * n * inner;
                        for k in 0..n * inner {
                            buf[dst + k] += g[src + k];
                        }
                    }
                });
            }
            Op::GatherRows(a, ref idx) => {
                let row = numel(&val(a).shape()[1..]);
                accumulate(&mut adj[a.0], len(a), |buf| {
                    for (r, &src) in idx.iter().enumerate() {
                        for k in 0..row {
                            buf[src * row + k] += g[r * row + k];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let gv = g[0];
                accumulate(&mut adj[a.0], len(a), |buf| {
                    for x in buf.iter_mut() {
                        *x += gv;
                    }
                });
            }
            Op::SumAxis(a, axis) => {
                let (outer, ext, inner) = axis_blocks(val(a).shape(), axis);
                accumulate(&mut adj[a.0], len(a), |buf| {
                    for o in 0..outer {
                        for e in 0..ext {
                            let base = (o * ext + e) * inner;
                            for k in 0..inner {
                                buf[base + k] += g[o * inner + k];
                            }
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let (outer, ext, inner) = axis_blocks(out.shape(), axis);
                let y = out.data();
                accumulate(&mut adj[a.0], len(a), |buf| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |e: usize| (o * ext + e) * inner + k;
                            let dot: f64 = (0..ext).map(|e| g[at(e)] * y[at(e)]).sum();
                            for e in 0..ext {
                                buf[at(e)] += y[at(e)] * (g[at(e)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, ext, inner) = axis_blocks(out.shape(), axis);
                let y = out.data();
                accumulate(&mut adj[a.0], len(a), |buf| {
                    for o in 0..outer {
                        for k in 0..inner {
                            let at = |e: usize| (o * ext + e) * inner + k;
                            let gs: f64 = (0..ext).map(|e| g[at(e)]).sum();
                            for e in 0..ext {
                                buf[at(e)] += g[at(e)] - y[at(e)].exp() * gs;
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }

    fn unary_back(
        &self,
        a: Var,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, f64) -> f64,
    ) {
        let x = self.nodes[a.0].value.data();
        accumulate(&mut adj[a.0], x.len(), |buf| {
            for k in 0..g.len() {
                buf[k] += g[k] * d(x[k], 0.0);
            }
        });
    }

    fn unary_back_out(
        &self,
        a: Var,
        out: &Tensor,
        g: &[f64],
        adj: &mut [Option<Vec<f64>>],
        d: impl Fn(f64, f64) -> f64,
    ) {
        let x = self.nodes[a.0].value.data();
        let y = out.data();
        accumulate(&mut adj[a.0], x.len(), |buf| {
            for k in 0..g.len() {
                buf[k] += g[k] * d(x[k], y[k]);
            }
        });
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax (or log-softmax) of a plain tensor, shared by the graph op and
/// gradient-free callers.
pub fn softmax_forward(
    x: &Tensor,
    axis: usize,
    mask: Option<&Tensor>,
    log: bool,
) -> Result<Tensor> {
    let shape = x.shape();
    check_axis("softmax", axis, shape.len())?;
    let masked: Option<Vec<f64>> = match mask {
        Some(m) => {
            let out = broadcast_shape("softmax mask", m.shape(), shape)?;
            if out != shape {
                return Err(TensorError::Dimension {
                    op: "softmax mask",
                    lhs: shape.to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
            let map = broadcast_index_map(m.shape(), shape);
            let md = m.data();
            Some(
                x.data()
                    .iter()
                    .zip(&map)
                    .map(|(&v, &j)| v + md[j])
                    .collect(),
            )
        }
        None => None,
    };
    let src: &[f64] = masked.as_deref().unwrap_or(x.data());
    let (outer, ext, inner) = axis_blocks(shape, axis);
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |e: usize| (o * ext + e) * inner + k;
            let mx = (0..ext)
                .map(|e| src[at(e)])
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY || ext == 0 {
                return Err(TensorError::DegenerateSlice {
                    op: "softmax",
                    slice: o * inner + k,
                });
            }
            let mut z = 0.0;
            for e in 0..ext {
                let v = (src[at(e)] - mx).exp();
                out[at(e)] = v;
                z += v;
            }
            if log {
                let lz = z.ln();
                for e in 0..ext {
                    out[at(e)] = src[at(e)] - mx - lz;
                }
            } else {
                for e in 0..ext {
                    out[at(e)] /= z;
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), out)
}
