//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is always a valid topological order
//! and [`Tape::backward`] simply walks it in reverse. Tapes are built fresh for
//! every forward pass.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    SliceCols { input: Var, start: usize },
    GroupMean { input: Var, group: usize },
    IndexSelect { input: Var, index: Vec<usize> },
    Pick { input: Var, index: Vec<usize> },
    Sum(Var),
    Reshape(Var),
    GroupWeightedSum { weights: Var, values: Var },
}

/// Primitive kinds that can be applied generically through [`Tape::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Mul,
    Tanh,
    Sigmoid,
    Softmax,
    LogSoftmax,
    Concat,
    /// Mean over all rows, `[m, n] -> [1, n]`.
    Mean,
    IndexSelect(Vec<usize>),
    Log,
    Sum,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Tanh => "tanh",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Concat => "concat",
            OpKind::Mean => "mean",
            OpKind::IndexSelect(_) => "index_select",
            OpKind::Log => "log",
            OpKind::Sum => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every node that influences it.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a leaf. Intermediate nodes are not retained.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient of `v` out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient for `v`, or zeros of its shape when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn check_rank2(op: &'static str, t: &Tensor) -> Result<()> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok(())
}

/// `b` may broadcast to `a` along rows and/or columns.
fn broadcastable(a: &Tensor, b: &Tensor) -> bool {
    (b.rows() == a.rows() || b.rows() == 1) && (b.cols() == a.cols() || b.cols() == 1)
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    let (bm, bn) = (b.rows(), b.cols());
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(m * n);
    for r in 0..m {
        let arow = &ad[r * n..(r + 1) * n];
        let br = if bm == 1 { 0 } else { r };
        if bn == n {
            let brow = &bd[br * n..(br + 1) * n];
            out.extend(arow.iter().zip(brow).map(|(&x, &y)| f(x, y)));
        } else {
            let y = bd[br];
            out.extend(arow.iter().map(|&x| f(x, y)));
        }
    }
    out
}

/// Sums a full-size gradient down to the (possibly broadcast) shape of `b`.
fn reduce_to(grad: &[f64], m: usize, n: usize, bm: usize, bn: usize) -> Vec<f64> {
    if bm == m && bn == n {
        return grad.to_vec();
    }
    let mut out = vec![0.0; bm * bn];
    for r in 0..m {
        let br = if bm == 1 { 0 } else { r };
        let row = &grad[r * n..(r + 1) * n];
        if bn == n {
            for (o, g) in out[br * n..(br + 1) * n].iter_mut().zip(row) {
                *o += g;
            }
        } else {
            out[br] += row.iter().sum::<f64>();
        }
    }
    out
}

/// `out[m,n] = a[m,k] * b[k,n]`
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `out[m,k] = g[m,n] * b[k,n]^T`
fn matmul_bt_kernel(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `out[k,n] = a[m,k]^T * g[m,n]`
fn matmul_at_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

fn softmax_rows(x: &Tensor) -> Vec<f64> {
    let n = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= total);
    }
    out
}

fn log_softmax_rows(x: &Tensor) -> Vec<f64> {
    let n = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_rank2("leaf", &t)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push(t, Op::Leaf, true))
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        check_rank2("constant", &t)?;
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.push(t, Op::Constant, false))
    }

    /// Copies the value of `v` into a new constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(t, Op::Constant, false)
    }

    /// Applies one of the generic primitive kinds.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "{} expects {n} inputs, got {}",
                    kind.name(),
                    inputs.len()
                )));
            }
            Ok(())
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Mul => {
                arity(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpKind::Tanh => {
                arity(1)?;
                self.tanh(inputs[0])
            }
            OpKind::Sigmoid => {
                arity(1)?;
                self.sigmoid(inputs[0])
            }
            OpKind::Softmax => {
                arity(1)?;
                self.softmax(inputs[0])
            }
            OpKind::LogSoftmax => {
                arity(1)?;
                self.log_softmax(inputs[0])
            }
            OpKind::Concat => self.concat(inputs),
            OpKind::Mean => {
                arity(1)?;
                let rows = self.value(inputs[0]).rows();
                self.group_mean(inputs[0], rows)
            }
            OpKind::IndexSelect(idx) => {
                arity(1)?;
                self.index_select(inputs[0], idx)
            }
            OpKind::Log => {
                arity(1)?;
                self.log(inputs[0])
            }
            OpKind::Sum => {
                arity(1)?;
                self.sum(inputs[0])
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.cols() != bt.rows() {
            return Err(Error::shape("matmul", at.shape(), bt.shape()));
        }
        let (m, k, n) = (at.rows(), at.cols(), bt.cols());
        let out = Tensor::from_parts(vec![m, n], matmul_kernel(at.data(), bt.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", out, Op::MatMul(a, b), rg)
    }

    /// Elementwise sum; `b` may broadcast over rows and/or columns of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !broadcastable(at, bt) {
            return Err(Error::shape("add", at.shape(), bt.shape()));
        }
        let out = Tensor::from_parts(at.shape().to_vec(), zip_broadcast(at, bt, |x, y| x + y));
        let rg = self.rg(&[a, b]);
        self.push_checked("add", out, Op::Add(a, b), rg)
    }

    /// Elementwise product; `b` may broadcast over rows and/or columns of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if !broadcastable(at, bt) {
            return Err(Error::shape("mul", at.shape(), bt.shape()));
        }
        let out = Tensor::from_parts(at.shape().to_vec(), zip_broadcast(at, bt, |x, y| x * y));
        let rg = self.rg(&[a, b]);
        self.push_checked("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let at = self.value(a);
        let data = at.data().iter().map(|x| x * c).collect();
        let out = Tensor::from_parts(at.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push_checked("scale", out, Op::Scale(a, c), rg)
    }

    fn unary(&mut self, a: Var, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let at = self.value(a);
        let data = at.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::from_parts(at.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push_checked(name, out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "tanh", Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "sigmoid", Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, "log", Op::Log(a), f64::ln)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let out = Tensor::from_parts(at.shape().to_vec(), softmax_rows(at));
        let rg = self.rg(&[a]);
        self.push_checked("softmax", out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let at = self.value(a);
        let out = Tensor::from_parts(at.shape().to_vec(), log_softmax_rows(at));
        let rg = self.rg(&[a]);
        self.push_checked("log_softmax", out, Op::LogSoftmax(a), rg)
    }

    /// Concatenates along columns; all inputs must share a row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut n = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != m {
                return Err(Error::shape("concat", self.value(*first).shape(), t.shape()));
            }
            n += t.cols();
        }
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::from_parts(vec![m, n], data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let at = self.value(a);
        if len == 0 || start + len > at.cols() {
            return Err(Error::shape("slice_cols", at.shape(), &[start, len]));
        }
        let n = at.cols();
        let mut data = Vec::with_capacity(at.rows() * len);
        for row in at.data().chunks_exact(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_parts(vec![at.rows(), len], data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols { input: a, start }, rg))
    }

    /// Mean over consecutive groups of `group` rows: `[G*group, n] -> [G, n]`.
    pub fn group_mean(&mut self, a: Var, group: usize) -> Result<Var> {
        let at = self.value(a);
        if group == 0 || at.rows() % group != 0 {
            return Err(Error::shape("mean", at.shape(), &[group]));
        }
        let n = at.cols();
        let g = at.rows() / group;
        let mut data = vec![0.0; g * n];
        for (r, row) in at.data().chunks_exact(n).enumerate() {
            let o = &mut data[(r / group) * n..(r / group + 1) * n];
            for (x, y) in o.iter_mut().zip(row) {
                *x += y;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|x| *x *= inv);
        let out = Tensor::from_parts(vec![g, n], data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GroupMean { input: a, group }, rg))
    }

    /// Gathers rows (indices may repeat).
    pub fn index_select(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let at = self.value(a);
        if index.is_empty() {
            return Err(Error::InvalidArgument("index_select with no indices".into()));
        }
        let n = at.cols();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            if i >= at.rows() {
                return Err(Error::OutOfRange {
                    what: "index_select",
                    index: i,
                    size: at.rows(),
                });
            }
            data.extend_from_slice(at.row_slice(i));
        }
        let out = Tensor::from_parts(vec![index.len(), n], data);
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::IndexSelect {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// One element per row: `out[r, 0] = a[r, index[r]]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let at = self.value(a);
        if index.len() != at.rows() {
            return Err(Error::shape("pick", at.shape(), &[index.len()]));
        }
        let mut data = Vec::with_capacity(index.len());
        for (r, &c) in index.iter().enumerate() {
            if c >= at.cols() {
                return Err(Error::OutOfRange {
                    what: "pick",
                    index: c,
                    size: at.cols(),
                });
            }
            data.push(at.get(r, c));
        }
        let out = Tensor::from_parts(vec![index.len(), 1], data);
        let rg = self.rg(&[a]);
        Ok(self.push(
            out,
            Op::Pick {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push_checked("sum", Tensor::scalar(total), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let at = self.value(a);
        if rows * cols != at.numel() {
            return Err(Error::shape("reshape", at.shape(), &[rows, cols]));
        }
        let out = Tensor::from_parts(vec![rows, cols], at.data().to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// `out[b] = sum_n weights[b, n] * values[b * N + n]` for weights `[B, N]`
    /// and values `[B * N, d]`.
    pub fn group_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (wt, vt) = (self.value(weights), self.value(values));
        let (b, n) = (wt.rows(), wt.cols());
        if vt.rows() != b * n {
            return Err(Error::shape("group_weighted_sum", wt.shape(), vt.shape()));
        }
        let d = vt.cols();
        let mut data = vec![0.0; b * d];
        for bi in 0..b {
            let orow = &mut data[bi * d..(bi + 1) * d];
            for ni in 0..n {
                let w = wt.get(bi, ni);
                for (o, v) in orow.iter_mut().zip(vt.row_slice(bi * n + ni)) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::from_parts(vec![b, d], data);
        let rg = self.rg(&[weights, values]);
        self.push_checked(
            "group_weighted_sum",
            out,
            Op::GroupWeightedSum { weights, values },
            rg,
        )
    }

    /// Back-propagates from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let seed = Tensor::full(lt.shape(), 1.0);
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            // Only leaf gradients are kept; intermediates are dropped as soon as they are spent.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(&data)
                .for_each(|(a, b)| *a += b),
            slot @ None => {
                *slot = Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), data))
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.rows(), at.cols(), bt.cols());
                if self.requires_grad(*a) {
                    let da = matmul_bt_kernel(gd, bt.data(), m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let db = matmul_at_kernel(at.data(), gd, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.requires_grad(*b) {
                    let bt = self.value(*b);
                    let db = reduce_to(gd, out.rows(), out.cols(), bt.rows(), bt.cols());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let da = zip_broadcast(g, bt, |x, y| x * y);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    let full: Vec<f64> = gd.iter().zip(at.data()).map(|(x, y)| x * y).collect();
                    let db = reduce_to(&full, out.rows(), out.cols(), bt.rows(), bt.cols());
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, gd.iter().map(|x| x * c).collect());
            }
            Op::Tanh(a) => {
                let da = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Log(a) => {
                let da = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::Softmax(a) => {
                let n = out.cols();
                let mut da = Vec::with_capacity(out.numel());
                for (grow, yrow) in gd.chunks_exact(n).zip(out.data().chunks_exact(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    da.extend(grow.iter().zip(yrow).map(|(g, y)| y * (g - dot)));
                }
                self.accumulate(grads, *a, da);
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                let mut da = Vec::with_capacity(out.numel());
                for (grow, lrow) in gd.chunks_exact(n).zip(out.data().chunks_exact(n)) {
                    let total: f64 = grow.iter().sum();
                    da.extend(grow.iter().zip(lrow).map(|(g, l)| g - l.exp() * total));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Concat(parts) => {
                let n = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(out.rows() * w);
                        for grow in gd.chunks_exact(n) {
                            dp.extend_from_slice(&grow[offset..offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { input, start } => {
                let it = self.value(*input);
                let (n, len) = (it.cols(), out.cols());
                let mut da = vec![0.0; it.numel()];
                for (drow, grow) in da.chunks_exact_mut(n).zip(gd.chunks_exact(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *input, da);
            }
            Op::GroupMean { input, group } => {
                let it = self.value(*input);
                let n = it.cols();
                let inv = 1.0 / *group as f64;
                let mut da = Vec::with_capacity(it.numel());
                for r in 0..it.rows() {
                    let grow = &gd[(r / group) * n..(r / group + 1) * n];
                    da.extend(grow.iter().map(|x| x * inv));
                }
                self.accumulate(grads, *input, da);
            }
            Op::IndexSelect { input, index } => {
                let it = self.value(*input);
                let n = it.cols();
                let mut da = vec![0.0; it.numel()];
                for (&src, grow) in index.iter().zip(gd.chunks_exact(n)) {
                    for (d, x) in da[src * n..(src + 1) * n].iter_mut().zip(grow) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *input, da);
            }
            Op::Pick { input, index } => {
                let it = self.value(*input);
                let n = it.cols();
                let mut da = vec![0.0; it.numel()];
                for (r, &c) in index.iter().enumerate() {
                    da[r * n + c] = gd[r];
                }
                self.accumulate(grads, *input, da);
            }
            Op::Sum(a) => {
                let numel = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; numel]);
            }
            Op::Reshape(a) => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::GroupWeightedSum { weights, values } => {
                let (wt, vt) = (self.value(*weights), self.value(*values));
                let (b, n, d) = (wt.rows(), wt.cols(), vt.cols());
                if self.requires_grad(*weights) {
                    let mut dw = Vec::with_capacity(b * n);
                    for bi in 0..b {
                        let grow = &gd[bi * d..(bi + 1) * d];
                        for ni in 0..n {
                            let vrow = vt.row_slice(bi * n + ni);
                            dw.push(grow.iter().zip(vrow).map(|(x, y)| x * y).sum());
                        }
                    }
                    self.accumulate(grads, *weights, dw);
                }
                if self.requires_grad(*values) {
                    let mut dv = Vec::with_capacity(vt.numel());
                    for bi in 0..b {
                        let grow = &gd[bi * d..(bi + 1) * d];
                        for ni in 0..n {
                            let w = wt.get(bi, ni);
                            dv.extend(grow.iter().map(|x| w * x));
                        }
                    }
                    self.accumulate(grads, *values, dv);
                }
            }
        }
    }
}
