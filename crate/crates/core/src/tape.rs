//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every forward operation as a node whose parents
//! strictly precede it, so the node list is already in topological order.
//! [`Tape::grad`] walks it once in reverse. A tape supports exactly one
//! backward pass; build a fresh tape for every forward evaluation.
//!
//! The op set is closed: matmul (with optional operand transposes), add,
//! multiply, scalar scale, row gather, log-softmax over the last axis,
//! sigmoid, log-sigmoid, tanh, log, negate, sum, mean and concatenate.
//! Broadcasting is limited to scalar-by-tensor scaling.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::{ParamLayout, ParamVector, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Operation kinds together with their attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    MatMul { trans_a: bool, trans_b: bool },
    Add,
    Mul,
    Scale(f64),
    GatherRows(Vec<usize>),
    LogSoftmax,
    Sigmoid,
    LogSigmoid,
    Tanh,
    Log,
    Neg,
    Sum,
    Mean,
    Concat { axis: usize },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::GatherRows(_) => "gather_rows",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sigmoid => "sigmoid",
            OpKind::LogSigmoid => "log_sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug)]
enum NodeKind {
    Constant,
    Param(String),
    Op(OpKind),
}

#[derive(Debug)]
struct Node {
    kind: NodeKind,
    parents: Vec<usize>,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Computation tape. Single-threaded; values may be copied out freely.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    inner: RefCell<Inner>,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), inner: RefCell::default() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    fn push(&self, kind: NodeKind, parents: Vec<usize>, value: Tensor, needs_grad: bool) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { kind, parents, value, needs_grad });
        Var { tape: self, idx: inner.nodes.len() - 1 }
    }

    /// Records a tensor that gradients never flow into.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(NodeKind::Constant, vec![], value, false)
    }

    /// Registers a named differentiable leaf.
    pub fn param(&self, name: &str, value: Tensor) -> Result<Var<'_>> {
        let taken = self.inner.borrow().nodes.iter().any(|n| matches!(&n.kind, NodeKind::Param(p) if p == name));
        if taken {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        Ok(self.push(NodeKind::Param(name.to_string()), vec![], value, true))
    }

    fn own(&self, v: Var<'_>) -> Result<usize> {
        if std::ptr::eq(v.tape, self) {
            Ok(v.idx)
        } else {
            Err(TensorError::ForeignTape)
        }
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.inner.borrow().nodes[v.idx].value.clone()
    }

    /// Applies one operation and records it.
    pub fn apply<'t>(&'t self, kind: OpKind, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        if self.inner.borrow().consumed {
            return Err(TensorError::TapeConsumed);
        }
        let parents = inputs.iter().map(|&v| self.own(v)).collect::<Result<Vec<_>>>()?;
        let (value, needs_grad) = {
            let inner = self.inner.borrow();
            let vals: Vec<&Tensor> = parents.iter().map(|&p| &inner.nodes[p].value).collect();
            let value = forward(&kind, &vals)?;
            if !value.is_finite() {
                return Err(TensorError::NonFinite { op: kind.name() });
            }
            (value, parents.iter().any(|&p| inner.nodes[p].needs_grad))
        };
        Ok(self.push(NodeKind::Op(kind), parents, value, needs_grad))
    }

    /// Reverse-mode gradient of a scalar `loss` with respect to `params`,
    /// laid out in the order given. Parameters that the loss does not
    /// depend on receive zero blocks. Consumes the tape.
    pub fn grad(&self, loss: Var<'_>, params: &[Var<'_>]) -> Result<ParamVector> {
        let loss_idx = self.own(loss)?;
        let mut blocks = Vec::with_capacity(params.len());
        {
            let inner = self.inner.borrow();
            if inner.consumed {
                return Err(TensorError::TapeConsumed);
            }
            let lv = &inner.nodes[loss_idx].value;
            if lv.len() != 1 {
                return Err(TensorError::NotScalar(lv.shape().to_vec()));
            }
            for &p in params {
                let idx = self.own(p)?;
                match &inner.nodes[idx].kind {
                    NodeKind::Param(name) => blocks.push((idx, name.clone(), inner.nodes[idx].value.shape().to_vec())),
                    _ => return Err(TensorError::NotAParam(idx)),
                }
            }
        }
        let adjoints = self.backward(loss_idx)?;
        let layout = ParamLayout::new(blocks.iter().map(|(_, n, s)| (n.clone(), s.clone())))?;
        let mut values = Vec::with_capacity(layout.total_len());
        for (idx, _, shape) in &blocks {
            match &adjoints[*idx] {
                Some(g) => values.extend_from_slice(g),
                None => values.extend(std::iter::repeat(0.0).take(shape.iter().product())),
            }
        }
        ParamVector::from_values(Arc::new(layout), values)
    }

    /// Gradient with respect to every registered parameter, in registration order.
    pub fn grad_all(&self, loss: Var<'_>) -> Result<ParamVector> {
        let params: Vec<Var<'_>> = {
            let inner = self.inner.borrow();
            inner.nodes.iter().enumerate().filter(|(_, n)| matches!(n.kind, NodeKind::Param(_))).map(|(idx, _)| Var { tape: self, idx }).collect()
        };
        self.grad(loss, &params)
    }

    fn backward(&self, loss_idx: usize) -> Result<Vec<Option<Vec<f64>>>> {
        let mut inner = self.inner.borrow_mut();
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        adj[loss_idx] = Some(vec![1.0]);
        for idx in (0..=loss_idx).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            let NodeKind::Op(kind) = &node.kind else {
                adj[idx] = Some(g);
                continue;
            };
            let parent_vals: Vec<&Tensor> = node.parents.iter().map(|&p| &nodes[p].value).collect();
            let grads = backward_op(kind, &parent_vals, &node.value, &g);
            for (&p, pg) in node.parents.iter().zip(grads) {
                if !nodes[p].needs_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut adj[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            // keep parameter adjoints, drop intermediate ones
            adj[idx] = None;
        }
        Ok(adj)
    }

    pub fn matmul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::MatMul { trans_a: false, trans_b: false }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_nt<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::MatMul { trans_a: false, trans_b: true }, &[a, b])
    }

    pub fn add<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul<'t>(&'t self, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale<'t>(&'t self, a: Var<'t>, c: f64) -> Result<Var<'t>> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn gather_rows<'t>(&'t self, a: Var<'t>, rows: Vec<usize>) -> Result<Var<'t>> {
        self.apply(OpKind::GatherRows(rows), &[a])
    }

    pub fn log_softmax<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::LogSoftmax, &[a])
    }

    pub fn sigmoid<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn log_sigmoid<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::LogSigmoid, &[a])
    }

    pub fn tanh<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::Tanh, &[a])
    }

    pub fn log<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn neg<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::Neg, &[a])
    }

    pub fn sum<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn mean<'t>(&'t self, a: Var<'t>) -> Result<Var<'t>> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        self.apply(OpKind::Concat { axis }, parts)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn tape_id(&self) -> u64 {
        self.tape.id
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.idx].value.shape().to_vec()
    }

    /// Scalar value; `None` unless the tensor has exactly one element.
    pub fn item(&self) -> Option<f64> {
        self.tape.inner.borrow().nodes[self.idx].value.item()
    }
}

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn arity(op: &'static str, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() == n {
        Ok(())
    } else {
        Err(mismatch(op, format!("expected {} inputs, got {}", n, inputs.len())))
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

/// Plain `(m×k)·(k×n)` product on row-major slices.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `op(A)·op(B)` where `op` optionally transposes; returns `(m, n, data)`.
fn matmul_flags(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<(usize, usize, Vec<f64>)> {
    let (ar, ac) = a.dims2().ok_or_else(|| mismatch("matmul", format!("lhs {:?} is not a matrix", a.shape())))?;
    let (br, bc) = b.dims2().ok_or_else(|| mismatch("matmul", format!("rhs {:?} is not a matrix", b.shape())))?;
    let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k1 != k2 {
        return Err(mismatch(
            "matmul",
            format!("inner dims differ: {:?}{} x {:?}{}", a.shape(), if ta { "ᵀ" } else { "" }, b.shape(), if tb { "ᵀ" } else { "" }),
        ));
    }
    let ad;
    let a_eff: &[f64] = if ta {
        ad = transpose(a.data(), ar, ac);
        &ad
    } else {
        a.data()
    };
    let bd;
    let b_eff: &[f64] = if tb {
        bd = transpose(b.data(), br, bc);
        &bd
    } else {
        b.data()
    };
    Ok((m, n, gemm(a_eff, b_eff, m, k1, n)))
}

fn last_axis(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn concat_geometry(shapes: &[&[usize]], axis: usize) -> Result<(usize, usize, Vec<usize>, Vec<usize>)> {
    let first = shapes.first().ok_or_else(|| mismatch("concat", "no inputs".into()))?;
    if axis >= first.len() {
        return Err(mismatch("concat", format!("axis {} out of range for rank {}", axis, first.len())));
    }
    for s in shapes {
        if s.len() != first.len() || s.iter().enumerate().any(|(d, &v)| d != axis && v != first[d]) {
            return Err(mismatch("concat", format!("{:?} vs {:?} along axis {}", first, s, axis)));
        }
    }
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
    let mut out_shape = first.to_vec();
    out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
    Ok((outer, inner, widths, out_shape))
}

fn forward(kind: &OpKind, x: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::MatMul { trans_a, trans_b } => {
            arity("matmul", x, 2)?;
            let (m, n, data) = matmul_flags(x[0], *trans_a, x[1], *trans_b)?;
            Tensor::new(vec![m, n], data)
        }
        OpKind::Add | OpKind::Mul => {
            let name = kind.name();
            arity(name, x, 2)?;
            if x[0].shape() != x[1].shape() {
                return Err(mismatch(name, format!("{:?} vs {:?}", x[0].shape(), x[1].shape())));
            }
            let f = if *kind == OpKind::Add { |a: f64, b: f64| a + b } else { |a: f64, b: f64| a * b };
            let data = x[0].data().iter().zip(x[1].data()).map(|(&a, &b)| f(a, b)).collect();
            Tensor::new(x[0].shape().to_vec(), data)
        }
        OpKind::Scale(c) => {
            arity("scale", x, 1)?;
            Ok(x[0].map(|v| c * v))
        }
        OpKind::GatherRows(rows) => {
            arity("gather_rows", x, 1)?;
            let (r, c) = x[0].dims2().ok_or_else(|| mismatch("gather_rows", format!("{:?} is not a matrix", x[0].shape())))?;
            let mut data = Vec::with_capacity(rows.len() * c);
            for &i in rows {
                if i >= r {
                    return Err(TensorError::IndexOutOfRange { index: i, len: r });
                }
                data.extend_from_slice(x[0].row(i));
            }
            Tensor::new(vec![rows.len(), c], data)
        }
        OpKind::LogSoftmax => {
            arity("log_softmax", x, 1)?;
            let w = last_axis(x[0]);
            if w == 0 {
                return Err(mismatch("log_softmax", "empty last axis".into()));
            }
            let mut data = x[0].data().to_vec();
            for row in data.chunks_mut(w) {
                let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                row.iter_mut().for_each(|v| *v -= lse);
            }
            Tensor::new(x[0].shape().to_vec(), data)
        }
        OpKind::Sigmoid => {
            arity("sigmoid", x, 1)?;
            Ok(x[0].map(stable_sigmoid))
        }
        OpKind::LogSigmoid => {
            arity("log_sigmoid", x, 1)?;
            Ok(x[0].map(log_sigmoid))
        }
        OpKind::Tanh => {
            arity("tanh", x, 1)?;
            Ok(x[0].map(f64::tanh))
        }
        OpKind::Log => {
            arity("log", x, 1)?;
            Ok(x[0].map(f64::ln))
        }
        OpKind::Neg => {
            arity("neg", x, 1)?;
            Ok(x[0].map(|v| -v))
        }
        OpKind::Sum => {
            arity("sum", x, 1)?;
            Ok(Tensor::scalar(x[0].data().iter().sum()))
        }
        OpKind::Mean => {
            arity("mean", x, 1)?;
            if x[0].is_empty() {
                return Err(mismatch("mean", "empty tensor".into()));
            }
            Ok(Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].len() as f64))
        }
        OpKind::Concat { axis } => {
            let shapes: Vec<&[usize]> = x.iter().map(|t| t.shape()).collect();
            let (outer, _, widths, out_shape) = concat_geometry(&shapes, *axis)?;
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for (t, &w) in x.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            Tensor::new(out_shape, data)
        }
    }
}

/// Adjoint contributions for each parent of one node.
fn backward_op(kind: &OpKind, x: &[&Tensor], y: &Tensor, g: &[f64]) -> Vec<Option<Vec<f64>>> {
    match kind {
        OpKind::MatMul { trans_a, trans_b } => {
            let gt = Tensor::new(y.shape().to_vec(), g.to_vec()).expect("adjoint shape");
            // C = op(A)·op(B)
            let da = if *trans_a {
                // A = (op(B)·dCᵀ)
                matmul_flags(x[1], *trans_b, &gt, true).expect("matmul adjoint").2
            } else {
                matmul_flags(&gt, false, x[1], !*trans_b).expect("matmul adjoint").2
            };
            let db = if *trans_b {
                matmul_flags(&gt, true, x[0], *trans_a).expect("matmul adjoint").2
            } else {
                matmul_flags(x[0], !*trans_a, &gt, false).expect("matmul adjoint").2
            };
            vec![Some(da), Some(db)]
        }
        OpKind::Add => vec![Some(g.to_vec()), Some(g.to_vec())],
        OpKind::Mul => {
            let da = g.iter().zip(x[1].data()).map(|(g, b)| g * b).collect();
            let db = g.iter().zip(x[0].data()).map(|(g, a)| g * a).collect();
            vec![Some(da), Some(db)]
        }
        OpKind::Scale(c) => vec![Some(g.iter().map(|v| c * v).collect())],
        OpKind::GatherRows(rows) => {
            let c = x[0].shape()[1];
            let mut d = vec![0.0; x[0].len()];
            for (k, &i) in rows.iter().enumerate() {
                for j in 0..c {
                    d[i * c + j] += g[k * c + j];
                }
            }
            vec![Some(d)]
        }
        OpKind::LogSoftmax => {
            let w = last_axis(y);
            let mut d = vec![0.0; g.len()];
            for ((drow, yrow), grow) in d.chunks_mut(w).zip(y.data().chunks(w)).zip(g.chunks(w)) {
                let gsum: f64 = grow.iter().sum();
                for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                    *dv = gv - yv.exp() * gsum;
                }
            }
            vec![Some(d)]
        }
        OpKind::Sigmoid => vec![Some(y.data().iter().zip(g).map(|(s, g)| s * (1.0 - s) * g).collect())],
        OpKind::LogSigmoid => {
            vec![Some(x[0].data().iter().zip(g).map(|(&v, g)| stable_sigmoid(-v) * g).collect())]
        }
        OpKind::Tanh => vec![Some(y.data().iter().zip(g).map(|(t, g)| (1.0 - t * t) * g).collect())],
        OpKind::Log => vec![Some(x[0].data().iter().zip(g).map(|(v, g)| g / v).collect())],
        OpKind::Neg => vec![Some(g.iter().map(|v| -v).collect())],
        OpKind::Sum => vec![Some(vec![g[0]; x[0].len()])],
        OpKind::Mean => {
            let n = x[0].len() as f64;
            vec![Some(vec![g[0] / n; x[0].len()])]
        }
        OpKind::Concat { axis } => {
            let shapes: Vec<&[usize]> = x.iter().map(|t| t.shape()).collect();
            let (outer, _, widths, _) = concat_geometry(&shapes, *axis).expect("validated in forward");
            let total: usize = widths.iter().sum();
            let mut parts: Vec<Vec<f64>> = x.iter().map(|t| Vec::with_capacity(t.len())).collect();
            for o in 0..outer {
                let mut start = o * total;
                for (part, &w) in parts.iter_mut().zip(&widths) {
                    part.extend_from_slice(&g[start..start + w]);
                    start += w;
                }
            }
            parts.into_iter().map(Some).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let i = tape.constant(Tensor::identity(2));
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(c.value(), m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    }

    #[test]
    fn log_softmax_uniform_row() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let y = tape.log_softmax(z).unwrap().value();
        for v in y.data() {
            assert!((v + 4f64.ln()).abs() < 1e-15);
        }
        assert!((y.data()[0] + 1.386294).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_at_zero() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.sigmoid(z).unwrap().item(), Some(0.5));
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let p = tape.param("p", Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.grad(loss, &[p]).unwrap();
        assert_eq!(g.values(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn disconnected_param_gets_zero_block() {
        let tape = Tape::new();
        let p = tape.param("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let q = tape.param("q", Tensor::vector(vec![5.0])).unwrap();
        let loss = tape.sum(q).unwrap();
        let g = tape.grad(loss, &[p, q]).unwrap();
        assert_eq!(g.block("p").unwrap(), &[0.0, 0.0]);
        assert_eq!(g.block("q").unwrap(), &[1.0]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let tape = Tape::new();
        let p = tape.param("p", Tensor::scalar(2.0)).unwrap();
        let loss = tape.mul(p, p).unwrap();
        tape.grad(loss, &[p]).unwrap();
        assert_eq!(tape.grad(loss, &[p]), Err(TensorError::TapeConsumed));
        assert!(matches!(tape.neg(p), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let p = tape.param("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(tape.grad(p, &[p]), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn constants_are_not_params() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::scalar(1.0));
        let p = tape.param("p", Tensor::scalar(1.0)).unwrap();
        let loss = tape.mul(c, p).unwrap();
        assert!(matches!(tape.grad(loss, &[c]), Err(TensorError::NotAParam(_))));
    }

    #[test]
    fn foreign_vars_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.constant(Tensor::scalar(1.0));
        let b = t2.constant(Tensor::scalar(1.0));
        assert!(matches!(t1.add(a, b), Err(TensorError::ForeignTape)));
    }

    #[test]
    fn shape_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
        assert!(tape.matmul_nt(a, b).is_ok());
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { .. })));
        assert!(matches!(tape.gather_rows(a, vec![2]), Err(TensorError::IndexOutOfRange { .. })));
    }

    #[test]
    fn log_of_zero_is_non_finite_error() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0));
        assert_eq!(tape.log(a).err(), Some(TensorError::NonFinite { op: "log" }));
    }

    #[test]
    fn log_sigmoid_stays_finite_for_large_inputs() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![-1000.0, 0.0, 1000.0]));
        let v = tape.log_sigmoid(a).unwrap().value();
        assert_eq!(v.data()[0], -1000.0);
        assert!((v.data()[1] + 2f64.ln()).abs() < 1e-15);
        assert_eq!(v.data()[2], 0.0);
    }

    #[test]
    fn concat_along_both_axes() {
        let tape = Tape::new();
        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(m(&[&[5.0], &[6.0]]));
        let c = tape.concat(&[a, b], 1).unwrap().value();
        assert_eq!(c, m(&[&[1.0, 2.0, 5.0], &[3.0, 4.0, 6.0]]));
        let d = tape.constant(m(&[&[7.0, 8.0]]));
        let e = tape.concat(&[a, d], 0).unwrap().value();
        assert_eq!(e, m(&[&[1.0, 2.0], &[3.0, 4.0], &[7.0, 8.0]]));
    }
}
