use std::ops::Deref;

use super::tensor::{gemm, Tensor};
use super::NumError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Exp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    StackSteps(Vec<Var>),
    AttnScores(Var, Var),
    AttnContext(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Sum(Var),
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a define-by-run computation.
///
/// Parameters can be recorded by reference, so binding a model to a fresh
/// tape costs nothing beyond a pointer per tensor. Nodes are only ever
/// appended, so parents always precede their children.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    /// A tape that tracks gradients for parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which nothing requires a gradient; used for decoding.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    fn push(&mut self, value: Value<'p>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Value::Owned(value), op, rg)
    }

    /// Trainable leaf, borrowed from the caller.
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(Value::Borrowed(t), Op::Leaf, rg)
    }

    /// Trainable leaf that owns its value.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push(Value::Owned(t), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, false)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), NumError> {
        let s = self.value(v).shape();
        match s {
            [m, n] => Ok((*m, *n)),
            _ => Err(NumError::Contract(format!(
                "{op} expects a 2-d tensor, got shape {s:?}"
            ))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(NumError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        Ok(self.derived(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise binary op; shapes must be equal or one side a single element.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.is_scalar() {
            let y = tb.item();
            ta.map(|x| f(x, y))
        } else if ta.is_scalar() {
            let x = ta.item();
            tb.map(|y| f(x, y))
        } else {
            return Err(NumError::Shape {
                op: match op {
                    BinaryOp::Add => "add",
                    BinaryOp::Sub => "sub",
                    BinaryOp::Mul => "mul",
                },
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        Ok(self.derived(out, Op::Binary(op, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let f: fn(f64) -> f64 = match op {
            UnaryOp::Neg => |v| -v,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Exp => f64::exp,
        };
        let out = self.value(x).map(f);
        self.derived(out, Op::Unary(op, x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| c * v);
        self.derived(out, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v + c);
        self.derived(out, Op::AddScalar(x), &[x])
    }

    /// `1 - x`, the complement used by gated updates.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 - v);
        // value carries the +1 offset; the local derivative is that of a -1 scale
        self.derived(out, Op::Scale(x, -1.0), &[x])
    }

    /// Adds a bias row `[1 × n]` (or `[n]`) to every row of `x: [B × n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.numel() != n || tb.rows() != 1 {
            return Err(NumError::Shape {
                op: "add_row",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let b = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, &bj) in row.iter_mut().zip(b) {
                *o += bj;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.derived(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Concatenates `[B × c_i]` blocks along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::Contract("concat of zero tensors".into()))?;
        let (rows, _) = self.matrix_dims(*first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        Ok(self.derived(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Columns `start..start + len` of a `[B × n]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (rows, n) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(NumError::Contract(format!(
                "slice_cols {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let out = Tensor::from_parts(vec![rows, len], data);
        Ok(self.derived(out, Op::SliceCols(x, start), &[x]))
    }

    /// Stacks `[r_i × c]` blocks along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts
            .first()
            .ok_or_else(|| NumError::Contract("concat of zero tensors".into()))?;
        let (_, cols) = self.matrix_dims(*first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                return Err(NumError::Shape {
                    op: "concat_rows",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_parts(vec![rows, cols], data);
        Ok(self.derived(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..start + len` of a `[m × n]` matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let (m, n) = self.matrix_dims(x, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(NumError::Contract(format!(
                "slice_rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let data = self.value(x).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_parts(vec![len, n], data);
        Ok(self.derived(out, Op::SliceRows(x, start), &[x]))
    }

    /// Row lookup into an embedding table `[V × d]`, producing `[ids.len() × d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let (v, d) = self.matrix_dims(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(NumError::Contract("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NumError::Index { index: bad, len: v });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.derived(out, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    /// Stacks `T` matrices `[B × d]` into `[B × T × d]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var, NumError> {
        let first = steps
            .first()
            .ok_or_else(|| NumError::Contract("stack of zero tensors".into()))?;
        let (b, d) = self.matrix_dims(*first, "stack_steps")?;
        for &s in steps {
            if self.value(s).shape() != [b, d] {
                return Err(NumError::Shape {
                    op: "stack_steps",
                    lhs: vec![b, d],
                    rhs: self.value(s).shape().to_vec(),
                });
            }
        }
        let t = steps.len();
        let mut data = vec![0.0; b * t * d];
        for (ti, &s) in steps.iter().enumerate() {
            let src = self.value(s).data();
            for bi in 0..b {
                data[(bi * t + ti) * d..(bi * t + ti + 1) * d]
                    .copy_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        let out = Tensor::from_parts(vec![b, t, d], data);
        Ok(self.derived(out, Op::StackSteps(steps.to_vec()), steps))
    }

    fn batch3(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize), NumError> {
        match self.value(v).shape() {
            [b, t, d] => Ok((*b, *t, *d)),
            s => Err(NumError::Contract(format!(
                "{op} expects a 3-d tensor, got shape {s:?}"
            ))),
        }
    }

    /// Per-row dot products `s[b,t] = keys[b,t,:] · q[b,:]`.
    pub fn attn_scores(&mut self, keys: Var, q: Var) -> Result<Var, NumError> {
        let (b, t, d) = self.batch3(keys, "attn_scores")?;
        if self.value(q).shape() != [b, d] {
            return Err(NumError::Shape {
                op: "attn_scores",
                lhs: vec![b, t, d],
                rhs: self.value(q).shape().to_vec(),
            });
        }
        let (kd, qd) = (self.value(keys).data(), self.value(q).data());
        let mut data = vec![0.0; b * t];
        for bi in 0..b {
            let qrow = &qd[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let krow = &kd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                data[bi * t + ti] = dot(krow, qrow);
            }
        }
        let out = Tensor::from_parts(vec![b, t], data);
        Ok(self.derived(out, Op::AttnScores(keys, q), &[keys, q]))
    }

    /// Per-row convex combinations `c[b,:] = Σ_t w[b,t] · values[b,t,:]`.
    pub fn attn_context(&mut self, weights: Var, values: Var) -> Result<Var, NumError> {
        let (b, t, d) = self.batch3(values, "attn_context")?;
        if self.value(weights).shape() != [b, t] {
            return Err(NumError::Shape {
                op: "attn_context",
                lhs: self.value(weights).shape().to_vec(),
                rhs: vec![b, t, d],
            });
        }
        let (wd, vd) = (self.value(weights).data(), self.value(values).data());
        let mut data = vec![0.0; b * d];
        for bi in 0..b {
            let out = &mut data[bi * d..(bi + 1) * d];
            for ti in 0..t {
                let w = wd[bi * t + ti];
                let vrow = &vd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                for (o, &v) in out.iter_mut().zip(vrow) {
                    *o += w * v;
                }
            }
        }
        let out = Tensor::from_parts(vec![b, d], data);
        Ok(self.derived(out, Op::AttnContext(weights, values), &[weights, values]))
    }

    fn check_finite(&self, x: Var, op: &'static str) -> Result<(), NumError> {
        if self.value(x).data().iter().any(|v| v.is_nan()) {
            return Err(NumError::Numeric(format!("{op}: NaN in input")));
        }
        Ok(())
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumError> {
        self.check_finite(x, "softmax")?;
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.derived(out, Op::Softmax(x), &[x]))
    }

    /// Row-wise log-softmax over the last axis, computed with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, NumError> {
        self.check_finite(x, "log_softmax")?;
        let t = self.value(x);
        let n = t.cols();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            log_softmax_in_place(row);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        Ok(self.derived(out, Op::LogSoftmax(x), &[x]))
    }

    /// Selects `x[r, ids[r]]` from each row, producing `[B × 1]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var, NumError> {
        let (b, n) = self.matrix_dims(x, "pick")?;
        if ids.len() != b {
            return Err(NumError::Shape {
                op: "pick",
                lhs: vec![b, n],
                rhs: vec![ids.len()],
            });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(NumError::Index { index: bad, len: n });
        }
        let src = self.value(x).data();
        let data = ids.iter().enumerate().map(|(r, &i)| src[r * n + i]).collect();
        let out = Tensor::from_parts(vec![b, 1], data);
        Ok(self.derived(out, Op::Pick(x, ids.to_vec()), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.derived(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires a gradient and lies on a path to `loss`
    /// receives one; nodes not reached get a zero gradient of their shape.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(NumError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NumError::Contract(
                "backward on a value that does not depend on any parameter".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, slot) in grads.iter_mut().enumerate() {
            if slot.is_none() && self.nodes[i].requires_grad {
                *slot = Some(Tensor::zeros(self.nodes[i].value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], v: Var) -> Option<&'g mut Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape())))
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &*self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, gd, false, tb.data(), true, da.data_mut(), true);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, ta.data(), true, gd, false, db.data_mut(), true);
                }
            }
            Op::Binary(op, a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let a_bcast = ta.numel() != out.numel();
                let b_bcast = tb.numel() != out.numel();
                // local derivative of the output wrt each side is the other operand for mul
                let (sa, sb) = match op {
                    BinaryOp::Add => (Local::Const(1.0), Local::Const(1.0)),
                    BinaryOp::Sub => (Local::Const(1.0), Local::Const(-1.0)),
                    BinaryOp::Mul => (Local::of(tb, b_bcast), Local::of(ta, a_bcast)),
                };
                if let Some(da) = self.slot(grads, *a) {
                    sa.accumulate(da, gd, a_bcast);
                }
                if let Some(db) = self.slot(grads, *b) {
                    sb.accumulate(db, gd, b_bcast);
                }
            }
            Op::Unary(op, x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let y = out.data();
                    let dd = dx.data_mut();
                    for j in 0..gd.len() {
                        dd[j] += gd[j]
                            * match op {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Tanh => 1.0 - y[j] * y[j],
                                UnaryOp::Sigmoid => y[j] * (1.0 - y[j]),
                                UnaryOp::Exp => y[j],
                            };
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &gj) in dx.data_mut().iter_mut().zip(gd) {
                        *d += c * gj;
                    }
                }
            }
            Op::AddScalar(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &gj) in dx.data_mut().iter_mut().zip(gd) {
                        *d += gj;
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &gj) in dx.data_mut().iter_mut().zip(gd) {
                        *d += gj;
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    let n = db.numel();
                    let dd = db.data_mut();
                    for row in gd.chunks(n) {
                        for (d, &gj) in dd.iter_mut().zip(row) {
                            *d += gj;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(dp) = self.slot(grads, p) {
                        let dd = dp.data_mut();
                        for r in 0..rows {
                            for c in 0..w {
                                dd[r * w + c] += gd[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start) => {
                let len = out.cols();
                let rows = out.rows();
                let n = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    let dd = dx.data_mut();
                    for r in 0..rows {
                        for c in 0..len {
                            dd[r * n + start + c] += gd[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(dp) = self.slot(grads, p) {
                        for (d, &g) in dp.data_mut().iter_mut().zip(&gd[offset..offset + n]) {
                            *d += g;
                        }
                    }
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let n = out.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    let dd = &mut dx.data_mut()[start * n..start * n + gd.len()];
                    for (d, &g) in dd.iter_mut().zip(gd) {
                        *d += g;
                    }
                }
            }
            Op::GatherRows(table, ids) => {
                let d = out.cols();
                if let Some(dt) = self.slot(grads, *table) {
                    let dd = dt.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dd[id * d + c] += gd[r * d + c];
                        }
                    }
                }
            }
            Op::StackSteps(steps) => {
                let (b, t, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                for (ti, &s) in steps.iter().enumerate() {
                    if let Some(ds) = self.slot(grads, s) {
                        let dd = ds.data_mut();
                        for bi in 0..b {
                            for c in 0..d {
                                dd[bi * d + c] += gd[(bi * t + ti) * d + c];
                            }
                        }
                    }
                }
            }
            Op::AttnScores(keys, q) => {
                let s = self.value(*keys).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let (kd, qd) = (self.value(*keys).data(), self.value(*q).data());
                if let Some(dk) = self.slot(grads, *keys) {
                    let dd = dk.data_mut();
                    for bi in 0..b {
                        for ti in 0..t {
                            let gj = gd[bi * t + ti];
                            for c in 0..d {
                                dd[(bi * t + ti) * d + c] += gj * qd[bi * d + c];
                            }
                        }
                    }
                }
                if let Some(dq) = self.slot(grads, *q) {
                    let dd = dq.data_mut();
                    for bi in 0..b {
                        for ti in 0..t {
                            let gj = gd[bi * t + ti];
                            for c in 0..d {
                                dd[bi * d + c] += gj * kd[(bi * t + ti) * d + c];
                            }
                        }
                    }
                }
            }
            Op::AttnContext(w, values) => {
                let s = self.value(*values).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let (wd, vd) = (self.value(*w).data(), self.value(*values).data());
                if let Some(dw) = self.slot(grads, *w) {
                    let dd = dw.data_mut();
                    for bi in 0..b {
                        for ti in 0..t {
                            let vrow = &vd[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            dd[bi * t + ti] += dot(&gd[bi * d..(bi + 1) * d], vrow);
                        }
                    }
                }
                if let Some(dv) = self.slot(grads, *values) {
                    let dd = dv.data_mut();
                    for bi in 0..b {
                        for ti in 0..t {
                            let wj = wd[bi * t + ti];
                            for c in 0..d {
                                dd[(bi * t + ti) * d + c] += wj * gd[bi * d + c];
                            }
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = out.cols();
                    let dd = dx.data_mut();
                    for ((drow, yrow), grow) in dd
                        .chunks_mut(n)
                        .zip(out.data().chunks(n))
                        .zip(gd.chunks(n))
                    {
                        let inner = dot(yrow, grow);
                        for j in 0..n {
                            drow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = out.cols();
                    let dd = dx.data_mut();
                    for ((drow, yrow), grow) in dd
                        .chunks_mut(n)
                        .zip(out.data().chunks(n))
                        .zip(gd.chunks(n))
                    {
                        let total: f64 = grow.iter().sum();
                        for j in 0..n {
                            drow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                }
            }
            Op::Pick(x, ids) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = self.value(*x).cols();
                    let dd = dx.data_mut();
                    for (r, &id) in ids.iter().enumerate() {
                        dd[r * n + id] += gd[r];
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for d in dx.data_mut() {
                        *d += gd[0];
                    }
                }
            }
        }
    }
}

enum Local<'a> {
    Const(f64),
    Elems(&'a [f64]),
}

impl<'a> Local<'a> {
    fn of(t: &'a Tensor, bcast: bool) -> Self {
        if bcast {
            Local::Const(t.item())
        } else {
            Local::Elems(t.data())
        }
    }

    fn accumulate(&self, dst: &mut Tensor, g: &[f64], reduce: bool) {
        let dd = dst.data_mut();
        match (self, reduce) {
            (Local::Const(c), true) => dd[0] += c * g.iter().sum::<f64>(),
            (Local::Elems(v), true) => dd[0] += dot(g, v),
            (Local::Const(c), false) => {
                for (d, &gj) in dd.iter_mut().zip(g) {
                    *d += c * gj;
                }
            }
            (Local::Elems(v), false) => {
                for ((d, &gj), &vj) in dd.iter_mut().zip(g).zip(v.iter()) {
                    *d += gj * vj;
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
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
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    let lz = max + z.ln();
    for v in row.iter_mut() {
        *v -= lz;
    }
}
