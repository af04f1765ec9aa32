//! Define-by-run computation tape.
//!
//! Every forward pass records onto a fresh [`Tape`]. Ops whose inputs are all
//! constants are evaluated eagerly and stored as constants, so an inference
//! pass with no trainable leaves records nothing but values. [`Tape::backward`]
//! walks the nodes in exact reverse order of creation and returns the
//! gradients of the requires-grad leaves.
//!
//! Binary elementwise ops broadcast only their right operand, and only in two
//! ways: a shape that is a suffix of the left shape (bias rows, scalars), or
//! the left shape with its last axis collapsed to 1 (per-row scalars).
//! Anything else needs an explicit reshape.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, Result};
use crate::linalg::gemm;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Right operand repeats every `n` elements.
    Suffix(usize),
    /// Right operand holds one value per row of `n` elements.
    Trailing(usize),
}

impl Bcast {
    #[inline]
    fn map(self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Trailing(n) => i / n,
        }
    }

    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Bcast> {
        if lhs == rhs {
            return Ok(Bcast::Same);
        }
        let rhs_len: usize = rhs.iter().product();
        if rhs_len == 1 {
            return Ok(Bcast::Suffix(1));
        }
        if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
            return Ok(Bcast::Suffix(rhs_len));
        }
        if let Some((&last, head)) = lhs.split_last() {
            if rhs.len() == lhs.len() && rhs[..head.len()] == *head && rhs[head.len()] == 1 {
                return Ok(Bcast::Trailing(last));
            }
        }
        Err(AutodiffError::Shape {
            op,
            shapes: vec![lhs.to_vec(), rhs.to_vec()],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnKind {
    Relu,
    Sigmoid,
    Tanh,
    Silu,
    Square,
    Sqrt,
    Abs,
    Exp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary(BinKind, usize, usize, Bcast),
    MatMul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Unary(UnKind, usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    GatherRows { a: usize, idx: Vec<usize> },
    Reshape(usize),
    Broadcast(usize, Bcast),
    GroupMax { a: usize, argmax: Vec<usize> },
    BlockLeftMatMul { adj: usize, x: usize },
    Bmm3(usize, usize),
    Bmv3(usize, usize),
    Cross3(usize, usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Kinds of primitive accepted by [`Tape::apply`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Sub,
    Multiply,
    Divide,
    ConcatCols,
    ConcatRows,
    SliceCols { start: usize, end: usize },
    SliceRows { start: usize, end: usize },
    Relu,
    Sigmoid,
    Tanh,
    Silu,
    Square,
    Sqrt,
    Abs,
    Exp,
    MeanReduce,
    SumReduce,
    SumLast,
    Scale(f64),
    Broadcast,
    Cross3,
    Bmm3,
    Bmv3,
}

/// Recorded computation. One tape per forward pass; tapes are not shared
/// between threads.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
///
/// Only leaves created with [`Tape::param`] carry a gradient. Looking up a
/// constant, an intermediate value or a leaf the loss does not depend on
/// returns `None`; missing gradients are never zero-filled.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, &[s])),
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant leaf. It never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Records a trainable leaf whose gradient [`Tape::backward`] reports.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(AutodiffError::ForeignVar);
        }
        Ok(v.idx)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        v.tape == self.id && self.nodes[v.idx].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        })
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(&mut self, name: &'static str, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let bc = Bcast::resolve(name, ta.shape(), tb.shape())?;
        let (xa, xb) = (ta.data(), tb.data());
        let out: Vec<f64> = match kind {
            BinKind::Add => xa.iter().enumerate().map(|(i, v)| v + xb[bc.map(i)]).collect(),
            BinKind::Sub => xa.iter().enumerate().map(|(i, v)| v - xb[bc.map(i)]).collect(),
            BinKind::Mul => xa.iter().enumerate().map(|(i, v)| v * xb[bc.map(i)]).collect(),
            BinKind::Div => xa.iter().enumerate().map(|(i, v)| v / xb[bc.map(i)]).collect(),
        };
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        self.push(name, value, Op::Binary(kind, ia, ib, bc), &[ia, ib])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("multiply", BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("divide", BinKind::Div, a, b)
    }

    // ---- scalar affine ------------------------------------------------------

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * factor).collect())?;
        self.push("scale", value, Op::Scale(ia, factor), &[ia])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v + c).collect())?;
        self.push("add_scalar", value, Op::AddScalar(ia), &[ia])
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, name: &'static str, kind: UnKind, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let f: fn(f64) -> f64 = match kind {
            UnKind::Relu => |x| x.max(0.0),
            UnKind::Sigmoid => sigmoid,
            UnKind::Tanh => f64::tanh,
            UnKind::Silu => |x| x * sigmoid(x),
            UnKind::Square => |x| x * x,
            UnKind::Sqrt => f64::sqrt,
            UnKind::Abs => f64::abs,
            UnKind::Exp => f64::exp,
        };
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        self.push(name, value, Op::Unary(kind, ia), &[ia])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", UnKind::Relu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", UnKind::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", UnKind::Tanh, a)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary("silu", UnKind::Silu, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", UnKind::Square, a)
    }

    /// Square root. The derivative at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", UnKind::Sqrt, a)
    }

    /// Absolute value with subgradient 0 at the origin.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", UnKind::Abs, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", UnKind::Exp, a)
    }

    /// Clamps into `[lo, hi]`; gradient flows only strictly inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ia = self.check(a)?;
        if lo > hi {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                detail: format!("lo {lo} > hi {hi}"),
            });
        }
        let t = &self.nodes[ia].value;
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x.clamp(lo, hi)).collect())?;
        self.push("clamp", value, Op::Clamp(ia, lo, hi), &[ia])
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.nodes[ia].value.data().iter().sum();
        self.push("sum-reduce", Tensor::scalar(s), Op::Sum(ia), &[ia])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        if t.is_empty() {
            return Err(shape_err("mean-reduce", &[t.shape()]));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean-reduce", Tensor::scalar(m), Op::Mean(ia), &[ia])
    }

    /// Sums over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let Some((_, head)) = t.shape().split_last() else {
            return Err(shape_err("sum_last", &[t.shape()]));
        };
        let c = t.cols();
        let out: Vec<f64> = t.data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        let mut shape = head.to_vec();
        shape.push(1);
        let value = Tensor::new(shape, out)?;
        self.push("sum_last", value, Op::SumLast(ia), &[ia])
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let (rows, _) = require_2d("concat", &self.nodes[*first].value)?;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = require_2d("concat", &self.nodes[i].value)?;
            if r != rows {
                let shapes: Vec<Vec<usize>> = idx.iter().map(|&j| self.nodes[j].value.shape().to_vec()).collect();
                return Err(AutodiffError::Shape { op: "concat", shapes });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[i].value.data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], out)?;
        self.push("concat", value, Op::ConcatCols(idx.clone()), &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let first = idx.first().ok_or(AutodiffError::InvalidArgument {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let (_, cols) = require_2d("concat", &self.nodes[*first].value)?;
        let mut rows = 0;
        for &i in &idx {
            let (r, c) = require_2d("concat", &self.nodes[i].value)?;
            if c != cols {
                let shapes: Vec<Vec<usize>> = idx.iter().map(|&j| self.nodes[j].value.shape().to_vec()).collect();
                return Err(AutodiffError::Shape { op: "concat", shapes });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &i in &idx {
            out.extend_from_slice(self.nodes[i].value.data());
        }
        let value = Tensor::new(vec![rows, cols], out)?;
        self.push("concat", value, Op::ConcatRows(idx.clone()), &idx)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (rows, cols) = require_2d("slice", t)?;
        if start > end || end > cols {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                detail: format!("columns {start}..{end} out of range for shape {:?}", t.shape()),
            });
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&t.data()[r * cols + start..r * cols + end]);
        }
        let value = Tensor::new(vec![rows, w], out)?;
        self.push("slice", value, Op::SliceCols { a: ia, start }, &[ia])
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (rows, cols) = require_2d("slice", t)?;
        if start > end || end > rows {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                detail: format!("rows {start}..{end} out of range for shape {:?}", t.shape()),
            });
        }
        let out = t.data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(vec![end - start, cols], out)?;
        self.push("slice", value, Op::SliceRows { a: ia, start }, &[ia])
    }

    /// Row gather: `out[r] = a[idx[r]]`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (rows, cols) = require_2d("gather_rows", t)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                detail: format!("row {bad} out of range for shape {:?}", t.shape()),
            });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(vec![idx.len(), cols], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                a: ia,
                idx: idx.to_vec(),
            },
            &[ia],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let value = self.nodes[ia].value.clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape(ia), &[ia])
    }

    /// Materialises `a` at `shape` under the right-operand broadcast rules.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let bc = Bcast::resolve("broadcast", shape, t.shape())?;
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| t.data()[bc.map(i)]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push("broadcast", value, Op::Broadcast(ia, bc), &[ia])
    }

    /// Column-wise max over consecutive row groups: `[g*m, c] -> [g, c]`.
    pub fn group_max(&mut self, a: Var, groups: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let t = &self.nodes[ia].value;
        let (rows, cols) = require_2d("group_max", t)?;
        if groups == 0 || rows % groups != 0 || rows == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "group_max",
                detail: format!("{rows} rows cannot form {groups} equal non-empty groups"),
            });
        }
        let m = rows / groups;
        let d = t.data();
        let mut out = vec![f64::NEG_INFINITY; groups * cols];
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            for r in g * m..(g + 1) * m {
                let row = &d[r * cols..(r + 1) * cols];
                let o = &mut out[g * cols..(g + 1) * cols];
                let am = &mut argmax[g * cols..(g + 1) * cols];
                for c in 0..cols {
                    if row[c] > o[c] {
                        o[c] = row[c];
                        am[c] = r;
                    }
                }
            }
        }
        let value = Tensor::new(vec![groups, cols], out)?;
        self.push("group_max", value, Op::GroupMax { a: ia, argmax }, &[ia])
    }

    // ---- linear algebra -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let ((m, k), (k2, n)) = match (require_2d("matmul", ta), require_2d("matmul", tb)) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(shape_err("matmul", &[ta.shape(), tb.shape()])),
        };
        if k != k2 {
            return Err(shape_err("matmul", &[ta.shape(), tb.shape()]));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), (k, 1), tb.data(), (n, 1), &mut out, (n, 1));
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(ia, ib), &[ia, ib])
    }

    /// Applies the square matrix `adj` `[j, j]` to every consecutive block of
    /// `j` rows of `x` `[b*j, h]`.
    pub fn block_left_matmul(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (ia, ix) = (self.check(adj)?, self.check(x)?);
        let (ta, tx) = (&self.nodes[ia].value, &self.nodes[ix].value);
        let (j, j2) = require_2d("block_left_matmul", ta)?;
        let (rows, h) = require_2d("block_left_matmul", tx)?;
        if j != j2 || j == 0 || rows % j != 0 {
            return Err(shape_err("block_left_matmul", &[ta.shape(), tx.shape()]));
        }
        let mut out = vec![0.0; rows * h];
        for b in 0..rows / j {
            let xs = &tx.data()[b * j * h..(b + 1) * j * h];
            let os = &mut out[b * j * h..(b + 1) * j * h];
            gemm(j, j, h, ta.data(), (j, 1), xs, (h, 1), os, (h, 1));
        }
        let value = Tensor::new(vec![rows, h], out)?;
        self.push("block_left_matmul", value, Op::BlockLeftMatMul { adj: ia, x: ix }, &[ia, ix])
    }

    fn rows_of(&self, op: &'static str, i: usize, width: usize) -> Result<usize> {
        let t = &self.nodes[i].value;
        match t.shape() {
            [r, c] if *c == width => Ok(*r),
            s => Err(shape_err(op, &[s])),
        }
    }

    /// Row-wise 3x3 product. Each row holds a matrix in column-major order.
    pub fn bmm3(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let ra = self.rows_of("bmm3", ia, 9)?;
        let rb = self.rows_of("bmm3", ib, 9)?;
        if ra != rb {
            return Err(shape_err("bmm3", &[self.nodes[ia].value.shape(), self.nodes[ib].value.shape()]));
        }
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; ra * 9];
        for r in 0..ra {
            let (x, y, o) = (&da[r * 9..r * 9 + 9], &db[r * 9..r * 9 + 9], &mut out[r * 9..r * 9 + 9]);
            for c in 0..3 {
                for i in 0..3 {
                    o[c * 3 + i] = x[i] * y[c * 3] + x[3 + i] * y[c * 3 + 1] + x[6 + i] * y[c * 3 + 2];
                }
            }
        }
        let value = Tensor::new(vec![ra, 9], out)?;
        self.push("bmm3", value, Op::Bmm3(ia, ib), &[ia, ib])
    }

    /// Row-wise 3x3 matrix (column-major rows of 9) times 3-vector.
    pub fn bmv3(&mut self, a: Var, v: Var) -> Result<Var> {
        let (ia, iv) = (self.check(a)?, self.check(v)?);
        let ra = self.rows_of("bmv3", ia, 9)?;
        let rv = self.rows_of("bmv3", iv, 3)?;
        if ra != rv {
            return Err(shape_err("bmv3", &[self.nodes[ia].value.shape(), self.nodes[iv].value.shape()]));
        }
        let (da, dv) = (self.nodes[ia].value.data(), self.nodes[iv].value.data());
        let mut out = vec![0.0; ra * 3];
        for r in 0..ra {
            let (m, x) = (&da[r * 9..r * 9 + 9], &dv[r * 3..r * 3 + 3]);
            for i in 0..3 {
                out[r * 3 + i] = m[i] * x[0] + m[3 + i] * x[1] + m[6 + i] * x[2];
            }
        }
        let value = Tensor::new(vec![ra, 3], out)?;
        self.push("bmv3", value, Op::Bmv3(ia, iv), &[ia, iv])
    }

    /// Row-wise cross product of two `[r, 3]` tensors.
    pub fn cross3(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let ra = self.rows_of("cross3", ia, 3)?;
        let rb = self.rows_of("cross3", ib, 3)?;
        if ra != rb {
            return Err(shape_err("cross3", &[self.nodes[ia].value.shape(), self.nodes[ib].value.shape()]));
        }
        let (da, db) = (self.nodes[ia].value.data(), self.nodes[ib].value.data());
        let mut out = vec![0.0; ra * 3];
        for r in 0..ra {
            cross_into(&da[r * 3..r * 3 + 3], &db[r * 3..r * 3 + 3], &mut out[r * 3..r * 3 + 3]);
        }
        let value = Tensor::new(vec![ra, 3], out)?;
        self.push("cross3", value, Op::Cross3(ia, ib), &[ia, ib])
    }

    /// Generic dispatcher over [`Primitive`] kinds.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::InvalidArgument {
                    op: "apply",
                    detail: format!("{prim:?} takes {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match prim {
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Multiply => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Divide => arity(2).and_then(|_| self.div(inputs[0], inputs[1])),
            Primitive::ConcatCols => self.concat_cols(inputs),
            Primitive::ConcatRows => self.concat_rows(inputs),
            Primitive::SliceCols { start, end } => arity(1).and_then(|_| self.slice_cols(inputs[0], start, end)),
            Primitive::SliceRows { start, end } => arity(1).and_then(|_| self.slice_rows(inputs[0], start, end)),
            Primitive::Relu => arity(1).and_then(|_| self.relu(inputs[0])),
            Primitive::Sigmoid => arity(1).and_then(|_| self.sigmoid(inputs[0])),
            Primitive::Tanh => arity(1).and_then(|_| self.tanh(inputs[0])),
            Primitive::Silu => arity(1).and_then(|_| self.silu(inputs[0])),
            Primitive::Square => arity(1).and_then(|_| self.square(inputs[0])),
            Primitive::Sqrt => arity(1).and_then(|_| self.sqrt(inputs[0])),
            Primitive::Abs => arity(1).and_then(|_| self.abs(inputs[0])),
            Primitive::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            Primitive::MeanReduce => arity(1).and_then(|_| self.mean(inputs[0])),
            Primitive::SumReduce => arity(1).and_then(|_| self.sum(inputs[0])),
            Primitive::SumLast => arity(1).and_then(|_| self.sum_last(inputs[0])),
            Primitive::Scale(c) => arity(1).and_then(|_| self.scale(inputs[0], c)),
            Primitive::Broadcast => {
                arity(2)?;
                let shape = self.value(inputs[1]).shape().to_vec();
                self.broadcast_to(inputs[0], &shape)
            }
            Primitive::Cross3 => arity(2).and_then(|_| self.cross3(inputs[0], inputs[1])),
            Primitive::Bmm3 => arity(2).and_then(|_| self.bmm3(inputs[0], inputs[1])),
            Primitive::Bmv3 => arity(2).and_then(|_| self.bmv3(inputs[0], inputs[1])),
        }
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    ///
    /// The tape is left intact, so `backward` may be called again (for example
    /// on a different loss recorded later on the same tape).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        let lt = &self.nodes[il].value;
        if lt.len() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }

    fn val(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    /// Accumulation buffer for node `j`, or `None` if it does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], j: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[j].requires_grad {
            return None;
        }
        let n = self.nodes[j].value.len();
        Some(grads[j].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.val(i);
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Binary(kind, a, b, bc) => {
                let (xa, xb) = (self.val(a), self.val(b));
                if let Some(ga) = self.slot(grads, a) {
                    match kind {
                        BinKind::Add | BinKind::Sub => ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi),
                        BinKind::Mul => {
                            for (k, s) in ga.iter_mut().enumerate() {
                                *s += g[k] * xb[bc.map(k)];
                            }
                        }
                        BinKind::Div => {
                            for (k, s) in ga.iter_mut().enumerate() {
                                *s += g[k] / xb[bc.map(k)];
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for k in 0..g.len() {
                        let j = bc.map(k);
                        gb[j] += match kind {
                            BinKind::Add => g[k],
                            BinKind::Sub => -g[k],
                            BinKind::Mul => g[k] * xa[k],
                            BinKind::Div => -g[k] * y[k] / xb[j],
                        };
                    }
                }
            }
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (xa, xb) = (self.val(a), self.val(b));
                if let Some(ga) = self.slot(grads, a) {
                    // dA = G * B^T
                    gemm(m, n, k, g, (n, 1), xb, (1, n), ga, (k, 1));
                }
                if let Some(gb) = self.slot(grads, b) {
                    // dB = A^T * G
                    gemm(k, m, n, xa, (1, k), g, (n, 1), gb, (n, 1));
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(s, gi)| *s += c * gi);
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(s, gi)| *s += gi);
                }
            }
            &Op::Unary(kind, a) => {
                let x = self.val(a);
                if let Some(ga) = self.slot(grads, a) {
                    for k in 0..g.len() {
                        let d = match kind {
                            UnKind::Relu => {
                                if x[k] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Sigmoid => y[k] * (1.0 - y[k]),
                            UnKind::Tanh => 1.0 - y[k] * y[k],
                            UnKind::Silu => {
                                let s = sigmoid(x[k]);
                                s + x[k] * s * (1.0 - s)
                            }
                            UnKind::Square => 2.0 * x[k],
                            UnKind::Sqrt => {
                                if y[k] > 0.0 {
                                    0.5 / y[k]
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Abs => {
                                if x[k] > 0.0 {
                                    1.0
                                } else if x[k] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Exp => y[k],
                        };
                        ga[k] += g[k] * d;
                    }
                }
            }
            &Op::Clamp(a, lo, hi) => {
                let x = self.val(a);
                if let Some(ga) = self.slot(grads, a) {
                    for k in 0..g.len() {
                        if x[k] > lo && x[k] < hi {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            &Op::Mean(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    let d = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|s| *s += d);
                }
            }
            &Op::SumLast(a) => {
                let c = self.nodes[a].value.cols().max(1);
                if let Some(ga) = self.slot(grads, a) {
                    for (k, s) in ga.iter_mut().enumerate() {
                        *s += g[k / c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[i].value.cols();
                let rows = self.nodes[i].value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(s, v)| *s += v);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    if let Some(gp) = self.slot(grads, p) {
                        gp.iter_mut().zip(&g[offset..offset + n]).for_each(|(s, v)| *s += v);
                    }
                    offset += n;
                }
            }
            &Op::SliceCols { a, start } => {
                let cols = self.nodes[a].value.cols();
                let w = self.nodes[i].value.cols();
                if let Some(ga) = self.slot(grads, a) {
                    for r in 0..g.len() / w.max(1) {
                        let dst = &mut ga[r * cols + start..r * cols + start + w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(s, v)| *s += v);
                    }
                }
            }
            &Op::SliceRows { a, start } => {
                let cols = self.nodes[a].value.cols();
                if let Some(ga) = self.slot(grads, a) {
                    let dst = &mut ga[start * cols..start * cols + g.len()];
                    dst.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            Op::GatherRows { a, idx } => {
                let cols = self.nodes[*a].value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &src) in idx.iter().enumerate() {
                        let dst = &mut ga[src * cols..(src + 1) * cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(s, v)| *s += v);
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(s, v)| *s += v);
                }
            }
            &Op::Broadcast(a, bc) => {
                if let Some(ga) = self.slot(grads, a) {
                    for (k, v) in g.iter().enumerate() {
                        ga[bc.map(k)] += v;
                    }
                }
            }
            Op::GroupMax { a, argmax } => {
                let cols = self.nodes[*a].value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &r) in argmax.iter().enumerate() {
                        ga[r * cols + k % cols] += g[k];
                    }
                }
            }
            &Op::BlockLeftMatMul { adj, x } => {
                let j = self.nodes[adj].value.shape()[0];
                let (rows, h) = (self.nodes[x].value.shape()[0], self.nodes[x].value.shape()[1]);
                let (da, dx) = (self.val(adj), self.val(x));
                if let Some(gadj) = self.slot(grads, adj) {
                    for b in 0..rows / j {
                        let gs = &g[b * j * h..(b + 1) * j * h];
                        let xs = &dx[b * j * h..(b + 1) * j * h];
                        // dA += G_b * X_b^T
                        gemm(j, h, j, gs, (h, 1), xs, (1, h), gadj, (j, 1));
                    }
                }
                if let Some(gx) = self.slot(grads, x) {
                    for b in 0..rows / j {
                        let gs = &g[b * j * h..(b + 1) * j * h];
                        // dX_b += A^T * G_b
                        gemm(j, j, h, da, (1, j), gs, (h, 1), &mut gx[b * j * h..(b + 1) * j * h], (h, 1));
                    }
                }
            }
            &Op::Bmm3(a, b) => {
                let (xa, xb) = (self.val(a), self.val(b));
                let rows = g.len() / 9;
                if let Some(ga) = self.slot(grads, a) {
                    // dA[i][k] = sum_c G[i][c] B[k][c]
                    for r in 0..rows {
                        let (gr, br) = (&g[r * 9..r * 9 + 9], &xb[r * 9..r * 9 + 9]);
                        for k in 0..3 {
                            for ii in 0..3 {
                                ga[r * 9 + k * 3 + ii] +=
                                    gr[ii] * br[k] + gr[3 + ii] * br[3 + k] + gr[6 + ii] * br[6 + k];
                            }
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    // dB[k][c] = sum_i A[i][k] G[i][c]
                    for r in 0..rows {
                        let (gr, ar) = (&g[r * 9..r * 9 + 9], &xa[r * 9..r * 9 + 9]);
                        for c in 0..3 {
                            for k in 0..3 {
                                gb[r * 9 + c * 3 + k] += ar[k * 3] * gr[c * 3]
                                    + ar[k * 3 + 1] * gr[c * 3 + 1]
                                    + ar[k * 3 + 2] * gr[c * 3 + 2];
                            }
                        }
                    }
                }
            }
            &Op::Bmv3(a, v) => {
                let (xa, xv) = (self.val(a), self.val(v));
                let rows = g.len() / 3;
                if let Some(ga) = self.slot(grads, a) {
                    for r in 0..rows {
                        for k in 0..3 {
                            for ii in 0..3 {
                                ga[r * 9 + k * 3 + ii] += g[r * 3 + ii] * xv[r * 3 + k];
                            }
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, v) {
                    for r in 0..rows {
                        let m = &xa[r * 9..r * 9 + 9];
                        for k in 0..3 {
                            gv[r * 3 + k] +=
                                m[k * 3] * g[r * 3] + m[k * 3 + 1] * g[r * 3 + 1] + m[k * 3 + 2] * g[r * 3 + 2];
                        }
                    }
                }
            }
            &Op::Cross3(a, b) => {
                let (xa, xb) = (self.val(a), self.val(b));
                let rows = g.len() / 3;
                let mut tmp = [0.0; 3];
                if let Some(ga) = self.slot(grads, a) {
                    // d/du <g, u x v> = v x g
                    for r in 0..rows {
                        cross_into(&xb[r * 3..r * 3 + 3], &g[r * 3..r * 3 + 3], &mut tmp);
                        ga[r * 3..r * 3 + 3].iter_mut().zip(&tmp).for_each(|(s, v)| *s += v);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    // d/dv <g, u x v> = g x u
                    for r in 0..rows {
                        cross_into(&g[r * 3..r * 3 + 3], &xa[r * 3..r * 3 + 3], &mut tmp);
                        gb[r * 3..r * 3 + 3].iter_mut().zip(&tmp).for_each(|(s, v)| *s += v);
                    }
                }
            }
        }
    }
}

#[inline]
fn cross_into(u: &[f64], v: &[f64], out: &mut [f64]) {
    out[0] = u[1] * v[2] - u[2] * v[1];
    out[1] = u[2] * v[0] - u[0] * v[2];
    out[2] = u[0] * v[1] - u[1] * v[0];
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3, 1], &[1., 0., -1.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[-2.0, -2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0);
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn mean_reduce() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[4], &[1., 2., 3., 6.]));
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m).item(), 3.0);
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            AutodiffError::Shape {
                op: "matmul",
                shapes: vec![vec![2, 3], vec![2, 3]]
            }
        );
        assert!(err.to_string().contains("matmul"));
        let c = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.add(a, c), Err(AutodiffError::Shape { op: "add", .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_of_dot_at_zero_weights() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[1, 3]));
        let x = tape.constant(t(&[3, 1], &[0.5, -1.0, 2.0]));
        let z = tape.matmul(w, x).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.125, -0.25, 0.5]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss { .. })));
    }

    #[test]
    fn detached_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let unused = tape.param(t(&[1], &[5.0]));
        let c = tape.constant(t(&[1], &[2.0]));
        let y = tape.mul(x, c).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
        assert!(grads.get(unused).is_none());
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn constant_only_ops_record_no_backward() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.square(a).unwrap();
        assert!(!tape.requires_grad(b));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1], &[-1.0]));
        assert_eq!(tape.sqrt(a).unwrap_err(), AutodiffError::NonFinite { op: "sqrt" });
    }

    #[test]
    fn foreign_vars_are_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.scalar(1.0);
        let b = t2.scalar(1.0);
        assert_eq!(t2.add(a, b).unwrap_err(), AutodiffError::ForeignVar);
    }

    #[test]
    fn broadcast_rules() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let bias = tape.constant(t(&[3], &[10., 20., 30.]));
        let per_row = tape.constant(t(&[2, 1], &[2., 3.]));
        let s = tape.add(a, bias).unwrap();
        assert_eq!(tape.value(s).data(), &[11., 22., 33., 14., 25., 36.]);
        let m = tape.mul(a, per_row).unwrap();
        assert_eq!(tape.value(m).data(), &[2., 4., 6., 12., 15., 18.]);
        let bad = tape.constant(t(&[2], &[1., 1.]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn group_max_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[4, 2], &[1., 8., 5., 2., 0., 0., -1., 3.]));
        let m = tape.group_max(x, 2).unwrap();
        assert_eq!(tape.value(m).data(), &[5., 8., 0., 3.]);
        let loss = tape.sum(m).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0., 1., 1., 0., 1., 0., 0., 1.]);
    }

    #[test]
    fn backward_can_run_twice() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let y = tape.square(x).unwrap();
        let g1 = tape.backward(y).unwrap();
        let g2 = tape.backward(y).unwrap();
        assert_eq!(g1.get(x), g2.get(x));
    }
}
