//! Reverse-mode gradient tape over dense matrices.
//!
//! Every forward op appends a node holding its value and the ids of its
//! inputs. Nodes are only ever appended after their inputs, so the node
//! order is already a topological order and `backward` walks it in reverse.

use std::sync::Arc;

use super::matrix::{Matrix, SparseMatrix};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// A sparse linear map with its transpose precomputed for the backward pass.
#[derive(Debug)]
pub struct SparseOperator {
    forward: SparseMatrix,
    transpose: SparseMatrix,
}

impl SparseOperator {
    pub fn new(forward: SparseMatrix) -> Self {
        let transpose = forward.transpose();
        SparseOperator { forward, transpose }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.forward
    }

    pub fn apply(&self, dense: &Matrix) -> Matrix {
        self.forward.mul_dense(dense)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Transpose(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    LogSigmoid(Var),
    SqrtEps(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Gather(Var, Arc<[usize]>),
    SpMM(Arc<SparseOperator>, Var),
    RowMatVec(Var, Var),
    PairwiseDist(Var),
    DoubleCenter(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. One tape per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input; gradients accumulate on it during `backward`.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::Shape {
                op: "matmul",
                lhs: va.shape(),
                rhs: vb.shape(),
            });
        }
        let out = va.matmul(vb);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(name, va, vb)?;
        let out = va.zip_map(vb, f);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
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

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(Error::Shape {
                op: "add_row",
                lhs: va.shape(),
                rhs: vr.shape(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    /// `a (n x m) * col (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.cols() != 1 || vc.rows() != va.rows() {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: va.shape(),
                rhs: vc.shape(),
            });
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            let c = vc.data()[r];
            out.row_mut(r).iter_mut().for_each(|x| *x *= c);
        }
        let rg = self.rg(a) || self.rg(col);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.value(p).rows(),
            None => return Err(Error::Config("concat of zero tensors".into())),
        };
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.value(parts[0]).shape(),
                    rhs: v.shape(),
                });
            }
            width += v.cols();
        }
        let mut out = Matrix::zeros(rows, width);
        let mut offset = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            for r in 0..rows {
                out.row_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row(r));
            }
            offset += v.cols();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Columns `[start, end)`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: va.shape(),
                rhs: (start, end),
            });
        }
        let out = va.slice_cols(start, end);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Slice(a, start), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// `ln(sigmoid(x))`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// `sqrt(x + eps)`.
    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, move |x| (x + eps).sqrt(), Op::SqrtEps(a))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg)
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Matrix::scalar(va.sum() / va.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Per-row sums, `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(va.rows(), 1, data).expect("row_sum shape");
        let rg = self.rg(a);
        self.push(out, Op::RowSum(a), rg)
    }

    /// Rows of `a` at `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= va.rows()) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: va.shape(),
                rhs: (bad, 0),
            });
        }
        let out = va.select_rows(indices);
        let rg = self.rg(a);
        Ok(self.push(out, Op::Gather(a, indices.into()), rg))
    }

    /// Sparse-dense product with a constant sparse operator.
    pub fn spmm(&mut self, op: &Arc<SparseOperator>, a: Var) -> Result<Var> {
        let va = self.value(a);
        if op.forward.cols() != va.rows() {
            return Err(Error::Shape {
                op: "spmm",
                lhs: (op.forward.rows(), op.forward.cols()),
                rhs: va.shape(),
            });
        }
        let out = op.apply(va);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SpMM(Arc::clone(op), a), rg))
    }

    /// Per-row matrix-vector product: row `r` of `mats` is an `m x m` matrix
    /// in row-major order applied to row `r` of `x`.
    pub fn row_matvec(&mut self, mats: Var, x: Var) -> Result<Var> {
        let (vm, vx) = (self.value(mats), self.value(x));
        let m = vx.cols();
        if vm.rows() != vx.rows() || vm.cols() != m * m {
            return Err(Error::Shape {
                op: "row_matvec",
                lhs: vm.shape(),
                rhs: vx.shape(),
            });
        }
        let mut out = Matrix::zeros(vx.rows(), m);
        for r in 0..vx.rows() {
            let mat = vm.row(r);
            let xr = vx.row(r);
            for (a, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = mat[a * m..(a + 1) * m]
                    .iter()
                    .zip(xr)
                    .map(|(w, v)| w * v)
                    .sum();
            }
        }
        let rg = self.rg(mats) || self.rg(x);
        Ok(self.push(out, Op::RowMatVec(mats, x), rg))
    }

    /// Euclidean distances between all row pairs, `n x p -> n x n`.
    /// Coincident rows get distance 0 and a zero subgradient.
    pub fn pairwise_distances(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.rows();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let d2: f64 = va
                    .row(i)
                    .iter()
                    .zip(va.row(j))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                let d = d2.sqrt();
                out[(i, j)] = d;
                out[(j, i)] = d;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::PairwiseDist(a), rg)
    }

    /// `D - rowmean - colmean + grandmean` on a square matrix.
    pub fn double_center(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rows() != va.cols() {
            return Err(Error::Shape {
                op: "double_center",
                lhs: va.shape(),
                rhs: va.shape(),
            });
        }
        let out = double_center(va);
        let rg = self.rg(a);
        Ok(self.push(out, Op::DoubleCenter(a), rg))
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut adj: Vec<Option<Matrix>> = Vec::with_capacity(loss.0 + 1);
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[id] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut send = |v: Var, contrib: Matrix| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot => *slot = Some(contrib),
            }
        };
        let y = &nodes[id].value;
        match &nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                if nodes[a.0].requires_grad {
                    send(*a, g.matmul(&val(*b).transpose()));
                }
                if nodes[b.0].requires_grad {
                    send(*b, val(*a).transpose().matmul(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                send(*a, g.zip_map(val(*b), |g, y| g * y));
                send(*b, g.zip_map(val(*a), |g, x| g * x));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                send(*a, g.zip_map(vb, |g, y| g / y));
                let num = g.zip_map(val(*a), |g, x| g * x);
                send(*b, num.zip_map(vb, |n, y| -n / (y * y)));
            }
            Op::AddRow(a, row) => {
                send(*a, g.clone());
                let mut acc = Matrix::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, &x) in acc.data_mut().iter_mut().zip(g.row(r)) {
                        *s += x;
                    }
                }
                send(*row, acc);
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (val(*a), val(*col));
                let mut da = g.clone();
                let mut dc = Matrix::zeros(vc.rows(), 1);
                for r in 0..g.rows() {
                    let c = vc.data()[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x *= c);
                    dc.data_mut()[r] = g.row(r).iter().zip(va.row(r)).map(|(g, x)| g * x).sum();
                }
                send(*a, da);
                send(*col, dc);
            }
            Op::Scale(a, c) => send(*a, g.scale(*c)),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    send(p, g.slice_cols(offset, offset + w));
                    offset += w;
                }
            }
            Op::Slice(a, start) => {
                let va = val(*a);
                let mut da = Matrix::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                send(*a, da);
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Tanh(a) => send(*a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
            Op::Relu(a) => send(*a, g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })),
            Op::Exp(a) => send(*a, g.zip_map(y, |g, y| g * y)),
            Op::Log(a) => send(*a, g.zip_map(val(*a), |g, x| g / x)),
            Op::LogSigmoid(a) => send(*a, g.zip_map(val(*a), |g, x| g * sigmoid(-x))),
            Op::SqrtEps(a) => send(*a, g.zip_map(y, |g, y| g / (2.0 * y))),
            Op::Softmax(a) => {
                let mut da = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(g, y)| g * y).sum();
                    for ((d, &gv), &yv) in da.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *d = yv * (gv - dot);
                    }
                }
                send(*a, da);
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for i in 0..r {
                    let gi = g.data()[i];
                    da.row_mut(i).iter_mut().for_each(|x| *x = gi);
                }
                send(*a, da);
            }
            Op::Gather(a, indices) => {
                let (r, c) = val(*a).shape();
                let mut da = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (d, &x) in da.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                send(*a, da);
            }
            Op::SpMM(op, a) => send(*a, op.transpose.mul_dense(g)),
            Op::RowMatVec(mats, x) => {
                let (vm, vx) = (val(*mats), val(*x));
                let m = vx.cols();
                let mut dm = Matrix::zeros(vm.rows(), vm.cols());
                let mut dx = Matrix::zeros(vx.rows(), m);
                for r in 0..vx.rows() {
                    let (gr, xr, mat) = (g.row(r), vx.row(r), vm.row(r));
                    let dmr = dm.row_mut(r);
                    for a in 0..m {
                        for b in 0..m {
                            dmr[a * m + b] = gr[a] * xr[b];
                        }
                    }
                    let dxr = dx.row_mut(r);
                    for a in 0..m {
                        for b in 0..m {
                            dxr[b] += mat[a * m + b] * gr[a];
                        }
                    }
                }
                send(*mats, dm);
                send(*x, dx);
            }
            Op::PairwiseDist(a) => {
                let va = val(*a);
                let (n, p) = va.shape();
                let mut da = Matrix::zeros(n, p);
                for i in 0..n {
                    for j in 0..n {
                        let d = y[(i, j)];
                        if i == j || d == 0.0 {
                            continue;
                        }
                        let w = (g[(i, j)] + g[(j, i)]) / d;
                        for c in 0..p {
                            da[(i, c)] += w * (va[(i, c)] - va[(j, c)]);
                        }
                    }
                }
                send(*a, da);
            }
            Op::DoubleCenter(a) => send(*a, double_center(g)),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    // ln σ(x) = -softplus(-x)
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

fn double_center(d: &Matrix) -> Matrix {
    let n = d.rows();
    let row_mean: Vec<f64> = (0..n).map(|r| d.row(r).iter().sum::<f64>() / n as f64).collect();
    let mut col_mean = vec![0.0; n];
    for r in 0..n {
        for (c, &x) in d.row(r).iter().enumerate() {
            col_mean[c] += x;
        }
    }
    col_mean.iter_mut().for_each(|x| *x /= n as f64);
    let grand = row_mean.iter().sum::<f64>() / n as f64;
    let mut out = d.clone();
    for r in 0..n {
        for (c, x) in out.row_mut(r).iter_mut().enumerate() {
            *x = *x - row_mean[r] - col_mean[c] + grand;
        }
    }
    out
}
