//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and enough information to push gradients
//! back to its inputs; node indices are therefore already in topological
//! order and [`Tape::backward`] is a single reverse sweep.
//!
//! A tape supports exactly one backward pass. Calling [`Tape::backward`] a
//! second time is an error rather than silently doubling gradients.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · wᵀ + b`, with `w` stored `out x in`.
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[r x n] + b[1 x n]` for every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Square(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    LogSoftmax(Var),
    GatherRows { table: Var, ids: Vec<usize> },
    Sum(Var),
    SumCols(Var),
    NllMean { logp: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    MaskRows { new: Var, old: Var, keep_new: Vec<bool> },
    MulConst { x: Var, factor: Vec<f64> },
    AddGroupBroadcast { keys: Var, query: Var },
    MaskedSoftmax(Var),
    GroupWeightedSum { weights: Var, values: Var },
}

#[derive(Debug)]
struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder and reverse-mode gradient engine.
///
/// Leaves may borrow their values (model parameters) for the lifetime `'p`
/// of the tape, so binding a model costs no copies.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::from_vec(t.rows(), t.cols(), data).expect("same shape")
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A trainable leaf borrowing its value.
    pub fn param_ref(&mut self, value: &'p Tensor) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A gradient-free leaf borrowing its value.
    pub fn constant_ref(&mut self, value: &'p Tensor) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, false)
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.push_cow(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, ta.data(), false, tb.data(), false, out.data_mut(), 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Affine map `x · wᵀ + b` with `w` of shape `out x in` and `b` of `1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.cols() != tw.cols() {
            return Err(Error::Shape {
                op: "linear",
                left: tx.shape(),
                right: tw.shape(),
            });
        }
        let (m, k, n) = (tx.rows(), tx.cols(), tw.rows());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, tx.data(), false, tw.data(), true, out.data_mut(), 0.0);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.shape() != [1, n] {
                return Err(Error::Shape {
                    op: "linear bias",
                    left: [1, n],
                    right: tb.shape(),
                });
            }
            for r in 0..m {
                for (o, bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = zip(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape() != [1, ta.cols()] {
            return Err(Error::Shape {
                op: "add_row",
                left: ta.shape(),
                right: tb.shape(),
            });
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = map(self.value(a), |x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| x + c);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x < 0.0) {
            return Err(Error::invalid("sqrt of a negative value"));
        }
        let out = map(self.value(a), f64::sqrt);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Sqrt(a), rg))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Horizontal concatenation; all parts must share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape(),
                    right: self.value(p).shape(),
                });
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Vertical stacking; all parts must share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape(),
                    right: tp.shape(),
                });
            }
            data.extend_from_slice(tp.data());
            rows += tp.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of `x`.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + width > tx.cols() {
            return Err(Error::Index {
                what: "slice_cols",
                index: start + width,
                bound: tx.cols(),
            });
        }
        let mut data = Vec::with_capacity(tx.rows() * width);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + width]);
        }
        let out = Tensor::from_vec(tx.rows(), width, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let tx = self.value(x);
        if rows * cols != tx.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: tx.shape(),
                right: [rows, cols],
            });
        }
        let out = tx.clone().reshaped(rows, cols);
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.cols() == 0 {
            return Err(Error::invalid("log_softmax over zero columns"));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            log_softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::LogSoftmax(x), rg))
    }

    /// Gathers rows `ids` of `table` (an embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * tt.cols());
        for &id in ids {
            if id >= tt.rows() {
                return Err(Error::Index {
                    what: "embedding lookup",
                    index: id,
                    bound: tt.rows(),
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::from_vec(ids.len(), tt.cols(), data)?;
        let rg = self.rg(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Per-row sums: `r x n -> r x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = (0..tx.rows()).map(|r| tx.row(r).iter().sum()).collect();
        let out = Tensor::from_vec(tx.rows(), 1, data).expect("r x 1");
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x), rg)
    }

    /// Mean of `-logp[t, targets[t]]` over positions with `mask[t]` set.
    pub fn nll_mean(&mut self, logp: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logp);
        if targets.len() != tl.rows() || mask.len() != tl.rows() {
            return Err(Error::Shape {
                op: "nll_mean",
                left: tl.shape(),
                right: [targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::AllMasked);
        }
        let mut total = 0.0;
        for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if target >= tl.cols() {
                return Err(Error::Index {
                    what: "target id",
                    index: target,
                    bound: tl.cols(),
                });
            }
            total -= tl.get(t, target);
        }
        let out = Tensor::scalar(total / count as f64);
        let rg = self.rg(logp);
        Ok(self.push(
            out,
            Op::NllMean {
                logp,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Row `r` of the result is `new[r]` if `keep_new[r]`, else `old[r]`.
    pub fn mask_rows(&mut self, new: Var, old: Var, keep_new: &[bool]) -> Result<Var> {
        check_same("mask_rows", self.value(new), self.value(old))?;
        if keep_new.len() != self.value(new).rows() {
            return Err(Error::Shape {
                op: "mask_rows",
                left: self.value(new).shape(),
                right: [keep_new.len(), 1],
            });
        }
        let mut out = self.value(new).clone();
        for (r, &k) in keep_new.iter().enumerate() {
            if !k {
                out.row_mut(r).copy_from_slice(self.value(old).row(r));
            }
        }
        let rg = self.rg(new) || self.rg(old);
        Ok(self.push(
            out,
            Op::MaskRows {
                new,
                old,
                keep_new: keep_new.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise product with a constant factor tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if factor.len() != tx.len() {
            return Err(Error::Shape {
                op: "mul_const",
                left: tx.shape(),
                right: [factor.len(), 1],
            });
        }
        let data = tx.data().iter().zip(&factor).map(|(a, f)| a * f).collect();
        let out = Tensor::from_vec(tx.rows(), tx.cols(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst { x, factor }, rg))
    }

    /// `keys` is `(b·m) x a` holding `b` groups of `m` rows; `query` is
    /// `b x a`. Row `g·m + j` of the result is `keys[g·m + j] + query[g]`.
    pub fn add_group_broadcast(&mut self, keys: Var, query: Var) -> Result<Var> {
        let (tk, tq) = (self.value(keys), self.value(query));
        if tq.rows() == 0 || tk.cols() != tq.cols() || tk.rows() % tq.rows() != 0 {
            return Err(Error::Shape {
                op: "add_group_broadcast",
                left: tk.shape(),
                right: tq.shape(),
            });
        }
        let m = tk.rows() / tq.rows();
        let mut out = tk.clone();
        for r in 0..out.rows() {
            for (o, q) in out.row_mut(r).iter_mut().zip(tq.row(r / m)) {
                *o += q;
            }
        }
        let rg = self.rg(keys) || self.rg(query);
        Ok(self.push(out, Op::AddGroupBroadcast { keys, query }, rg))
    }

    /// Row-wise softmax restricted to unmasked entries; masked entries are
    /// exactly zero. Every row needs at least one unmasked entry.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: tx.shape(),
                right: [mask.len(), 1],
            });
        }
        let cols = tx.cols();
        let mut out = Tensor::zeros(tx.rows(), cols);
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let mrow = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(mrow)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMasked);
            }
            let o = out.row_mut(r);
            let mut z = 0.0;
            for c in 0..cols {
                if mrow[c] {
                    o[c] = (row[c] - max).exp();
                    z += o[c];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaskedSoftmax(x), rg))
    }

    /// `weights` is `b x m`, `values` is `(b·m) x d`; row `g` of the result
    /// is `Σ_j weights[g, j] · values[g·m + j]`.
    pub fn group_weighted_sum(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(values));
        if tw.rows() * tw.cols() != tv.rows() {
            return Err(Error::Shape {
                op: "group_weighted_sum",
                left: tw.shape(),
                right: tv.shape(),
            });
        }
        let (b, m, d) = (tw.rows(), tw.cols(), tv.cols());
        let mut out = Tensor::zeros(b, d);
        for g in 0..b {
            let o = out.row_mut(g);
            for j in 0..m {
                let w = tw.get(g, j);
                if w == 0.0 {
                    continue;
                }
                for (oc, vc) in o.iter_mut().zip(tv.row(g * m + j)) {
                    *oc += w * vc;
                }
            }
        }
        let rg = self.rg(weights) || self.rg(values);
        Ok(self.push(out, Op::GroupWeightedSum { weights, values }, rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalar(shape));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass for `v`, if any flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when nothing flowed into `v`.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let [r, c] = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::from_vec(r, c, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(r, c),
        }
    }

    fn acc(&mut self, v: Var) -> Option<&mut [f64]> {
        slot(&self.nodes, &mut self.grads, v)
    }

    fn acc_add(&mut self, v: Var, g: &[f64], factor: f64) {
        if let Some(dst) = self.acc(v) {
            for (d, s) in dst.iter_mut().zip(g) {
                *d += factor * s;
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let [m, k] = self.shape(*a);
                let n = self.shape(*b)[1];
                let Tape { nodes, grads, .. } = &mut *self;
                if let Some(dst) = slot(nodes, grads, *a) {
                    gemm(m, n, k, g, false, nodes[b.0].value.data(), true, dst, 1.0);
                }
                if let Some(dst) = slot(nodes, grads, *b) {
                    gemm(k, m, n, nodes[a.0].value.data(), true, g, false, dst, 1.0);
                }
            }
            Op::Linear { x, w, b } => {
                let [m, k] = self.shape(*x);
                let n = self.shape(*w)[0];
                let Tape { nodes, grads, .. } = &mut *self;
                if let Some(dst) = slot(nodes, grads, *x) {
                    gemm(m, n, k, g, false, nodes[w.0].value.data(), false, dst, 1.0);
                }
                if let Some(dst) = slot(nodes, grads, *w) {
                    gemm(n, m, k, g, true, nodes[x.0].value.data(), false, dst, 1.0);
                }
                if let Some(b) = b {
                    if let Some(dst) = self.acc(*b) {
                        for r in 0..m {
                            for (d, s) in dst.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_add(*a, g, 1.0);
                self.acc_add(*b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_add(*a, g, 1.0);
                self.acc_add(*b, g, -1.0);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let local: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.acc_add(*a, &local, 1.0);
                }
                if self.rg(*b) {
                    let local: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[a.0].value.data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.acc_add(*b, &local, 1.0);
                }
            }
            Op::AddRow(a, b) => {
                self.acc_add(*a, g, 1.0);
                let n = self.shape(*b)[1];
                if let Some(dst) = self.acc(*b) {
                    for chunk in g.chunks(n) {
                        for (d, s) in dst.iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Scale(a, f) => self.acc_add(*a, g, *f),
            Op::AddScalar(a) => self.acc_add(*a, g, 1.0),
            Op::Tanh(a) => {
                let local: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.acc_add(*a, &local, 1.0);
            }
            Op::Sigmoid(a) => {
                let local: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.acc_add(*a, &local, 1.0);
            }
            Op::Sqrt(a) => {
                let local: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[i].value.data())
                    .map(|(g, y)| g * 0.5 / y)
                    .collect();
                self.acc_add(*a, &local, 1.0);
            }
            Op::Square(a) => {
                let local: Vec<f64> = g
                    .iter()
                    .zip(self.nodes[a.0].value.data())
                    .map(|(g, x)| 2.0 * g * x)
                    .collect();
                self.acc_add(*a, &local, 1.0);
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if let Some(dst) = self.acc(p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (d, s) in dst[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    self.acc_add(p, &g[offset..offset + n], 1.0);
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let [rows, w] = self.nodes[i].value.shape();
                let total = self.shape(*x)[1];
                let start = *start;
                if let Some(dst) = self.acc(*x) {
                    for r in 0..rows {
                        let d = &mut dst[r * total + start..r * total + start + w];
                        for (d, s) in d.iter_mut().zip(&g[r * w..(r + 1) * w]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => self.acc_add(*x, g, 1.0),
            Op::LogSoftmax(x) => {
                let [rows, cols] = self.nodes[i].value.shape();
                let mut local = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = self.nodes[i].value.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        local[r * cols + c] = gr[c] - y[c].exp() * gsum;
                    }
                }
                self.acc_add(*x, &local, 1.0);
            }
            Op::GatherRows { table, ids } => {
                let d = self.shape(*table)[1];
                if let Some(dst) = self.acc(*table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (dv, s) in dst[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..]) {
                            *dv += s;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                if let Some(dst) = self.acc(*x) {
                    dst.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::SumCols(x) => {
                let cols = self.shape(*x)[1];
                if let Some(dst) = self.acc(*x) {
                    for (r, gv) in g.iter().enumerate() {
                        dst[r * cols..(r + 1) * cols].iter_mut().for_each(|d| *d += gv);
                    }
                }
            }
            Op::NllMean {
                logp,
                targets,
                mask,
                count,
            } => {
                let cols = self.shape(*logp)[1];
                let scale = g[0] / *count as f64;
                if let Some(dst) = self.acc(*logp) {
                    for (t, (&target, &m)) in targets.iter().zip(mask).enumerate() {
                        if m {
                            dst[t * cols + target] -= scale;
                        }
                    }
                }
            }
            Op::MaskRows { new, old, keep_new } => {
                let cols = self.nodes[i].value.cols();
                for (var, want) in [(*new, true), (*old, false)] {
                    if let Some(dst) = self.acc(var) {
                        for (r, &k) in keep_new.iter().enumerate() {
                            if k == want {
                                let span = r * cols..(r + 1) * cols;
                                for (d, s) in dst[span.clone()].iter_mut().zip(&g[span]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
            Op::MulConst { x, factor } => {
                let local: Vec<f64> = g.iter().zip(factor).map(|(g, f)| g * f).collect();
                self.acc_add(*x, &local, 1.0);
            }
            Op::AddGroupBroadcast { keys, query } => {
                self.acc_add(*keys, g, 1.0);
                let [b, a] = self.shape(*query);
                let m = self.shape(*keys)[0] / b;
                if let Some(dst) = self.acc(*query) {
                    for r in 0..b * m {
                        let grp = r / m;
                        for (d, s) in dst[grp * a..(grp + 1) * a].iter_mut().zip(&g[r * a..]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                let [rows, cols] = self.nodes[i].value.shape();
                let mut local = vec![0.0; rows * cols];
                for r in 0..rows {
                    let y = self.nodes[i].value.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        local[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.acc_add(*x, &local, 1.0);
            }
            Op::GroupWeightedSum { weights, values } => {
                let [b, m] = self.shape(*weights);
                let d = self.shape(*values)[1];
                if self.rg(*weights) {
                    let mut local = vec![0.0; b * m];
                    let tv = &self.nodes[values.0].value;
                    for grp in 0..b {
                        for j in 0..m {
                            local[grp * m + j] = tv
                                .row(grp * m + j)
                                .iter()
                                .zip(&g[grp * d..(grp + 1) * d])
                                .map(|(v, g)| v * g)
                                .sum();
                        }
                    }
                    self.acc_add(*weights, &local, 1.0);
                }
                let Tape { nodes, grads, .. } = &mut *self;
                if let Some(dst) = slot(nodes, grads, *values) {
                    let tw = nodes[weights.0].value.data();
                    for grp in 0..b {
                        for j in 0..m {
                            let w = tw[grp * m + j];
                            let row = &mut dst[(grp * m + j) * d..(grp * m + j + 1) * d];
                            for (dv, gv) in row.iter_mut().zip(&g[grp * d..(grp + 1) * d]) {
                                *dv += w * gv;
                            }
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn slot<'a>(nodes: &[Node<'_>], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut [f64]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter_mut().for_each(|v| *v -= z);
}

/// Worst coordinate found by [`finite_diff_report`].
///
/// `roundoff_error` repeats the comparison with the denominator floor raised
/// from `1e-8` to `1e4 * 8 ulp(f) / (2h)`: a central difference of a loss
/// that is only known to a few ulps cannot resolve smaller gradients, so
/// disagreement below that level says nothing about the backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub param: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub loss: f64,
    pub roundoff_floor: f64,
    pub roundoff_error: f64,
}

fn ulp(x: f64) -> f64 {
    let x = x.abs();
    f64::from_bits(x.to_bits() + 1) - x
}

/// Compares backward gradients of `loss_fn` at `params` with central
/// differences of step `h`, returning the largest
/// `|a - n| / max(1e-8, |a| + |n|)` over every coordinate.
///
/// `loss_fn` receives a fresh tape and one trainable leaf per entry of
/// `params` and must return a `1 x 1` node.
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    finite_diff_report(loss_fn, params, h).map(|r| r.max_rel_error)
}

/// [`finite_diff_check`] with the location and values of the worst coordinate.
pub fn finite_diff_report<F>(loss_fn: F, params: &[Tensor], h: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference loss".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let f0 = tape.value(loss).item();
    if !f0.is_finite() {
        return Err(Error::NonFinite("finite-difference loss".into()));
    }
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();

    let roundoff_floor = (1e4 * 8.0 * ulp(f0) / (2.0 * h)).max(1e-8);
    let mut work = params.to_vec();
    let mut worst = FiniteDiffReport {
        loss: f0,
        roundoff_floor,
        ..Default::default()
    };
    for (p, grad) in analytic.iter().enumerate() {
        for j in 0..grad.len() {
            let orig = work[p].data()[j];
            work[p].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[p].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[p].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[j];
            let diff = (a - numeric).abs();
            let rel = diff / (a.abs() + numeric.abs()).max(1e-8);
            let rel_noise = diff / (a.abs() + numeric.abs()).max(roundoff_floor);
            worst.roundoff_error = worst.roundoff_error.max(rel_noise);
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.param = p;
                worst.index = j;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
    }
    Ok(worst)
}
