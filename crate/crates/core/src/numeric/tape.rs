//! Reverse-accumulation tape over matrix-valued primitives.
//!
//! Every node stores its operation and forward value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints; [`Tape::replay`]
//! recomputes every forward value from the current leaves.
//!
//! ```
//! use fuzzyalign::numeric::{Matrix, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Matrix::row_vector(&[3.0, 4.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(tape.value(loss).item(), 25.0);
//! assert_eq!(grads.get(x).as_slice(), &[6.0, 8.0]);
//! ```

use crate::error::{shape_err, Error, Result};

use super::matrix::Matrix;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
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
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Shift(Var, f64),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    Sum(Var),
    SumRows(Var),
    LogSoftmaxRows(Var),
    NormalizeRows(Var),
    LayerNormRows(Var),
    Clamp(Var, f64, f64),
    Transpose(Var),
    Reshape(Var, usize, usize),
    StopGrad(Var),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Gelu(_) => "gelu",
            Op::Sum(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::LogSoftmaxRows(_) => "log_softmax_rows",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::LayerNormRows(_) => "layer_norm_rows",
            Op::Clamp(..) => "clamp",
            Op::Transpose(_) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::StopGrad(_) => "stop_grad",
            Op::SliceRows(..) => "slice_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Shift(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::NormalizeRows(a)
            | Op::LayerNormRows(a)
            | Op::Clamp(a, ..)
            | Op::Transpose(a)
            | Op::Reshape(a, ..)
            | Op::SliceRows(a, ..)
            | Op::GatherRows(a, _) => vec![*a],
            // stop-grad has no differentiable input
            Op::StopGrad(_) => vec![],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

struct Node {
    op: Op,
    value: Matrix,
    needs_grad: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when nothing flowed.
    pub fn get(&self, var: Var) -> Matrix {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[var.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// True when no adjoint reached `var` at all.
    pub fn is_untouched(&self, var: Var) -> bool {
        self.grads[var.0].is_none()
    }
}

/// Single-threaded reverse-mode tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Differentiable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    /// Non-differentiable leaf; its gradient is always zero.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Matrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    /// Replaces a leaf value; call [`Tape::replay`] to refresh dependents.
    pub fn set_leaf(&mut self, var: Var, value: Matrix) -> Result<()> {
        let node = &mut self.nodes[var.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::InvalidArgument(format!(
                "node {} is not a leaf",
                var.0
            )));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err(
                "set_leaf",
                format!("{:?} vs {:?}", node.value.shape(), value.shape()),
            ));
        }
        node.value = value;
        Ok(())
    }

    /// Recomputes every non-leaf value in recording order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let value = self.forward(&self.nodes[i].op)?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<Var> {
        let value = self.forward(&op)?;
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn v(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    fn forward(&self, op: &Op) -> Result<Matrix> {
        let out = match op {
            Op::Leaf => unreachable!("leaves are not recomputed"),
            Op::MatMul(a, b) => self.v(*a).matmul(self.v(*b))?,
            Op::Add(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x + y)?,
            Op::Sub(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x - y)?,
            Op::Mul(a, b) => self.v(*a).zip_map(self.v(*b), |x, y| x * y)?,
            Op::AddRow(a, row) => broadcast_row(self.v(*a), self.v(*row), "add_row", |x, r| x + r)?,
            Op::MulRow(a, row) => broadcast_row(self.v(*a), self.v(*row), "mul_row", |x, r| x * r)?,
            Op::MulCol(a, col) => {
                let (a, col) = (self.v(*a), self.v(*col));
                if col.shape() != (a.rows(), 1) {
                    return Err(shape_err(
                        "mul_col",
                        format!("{:?} by column {:?}", a.shape(), col.shape()),
                    ));
                }
                Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) * col.get(i, 0))
            }
            Op::Scale(a, s) => self.v(*a).map(|x| x * s),
            Op::Shift(a, s) => self.v(*a).map(|x| x + s),
            Op::Exp(a) => self.v(*a).map(f64::exp),
            Op::Log(a) => self.v(*a).map(f64::ln),
            Op::Gelu(a) => self.v(*a).map(gelu),
            Op::Sum(a) => Matrix::scalar(self.v(*a).sum()),
            Op::SumRows(a) => {
                let a = self.v(*a);
                Matrix::from_fn(a.rows(), 1, |i, _| a.row(i).iter().sum())
            }
            Op::LogSoftmaxRows(a) => {
                let a = self.v(*a);
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let row = out.row_mut(i);
                    if row.is_empty() {
                        continue;
                    }
                    let top =
                        (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
                    let max = row[top];
                    // ln(1 + rest) keeps full precision when one entry dominates
                    let rest: f64 = (0..row.len())
                        .filter(|&j| j != top)
                        .map(|j| (row[j] - max).exp())
                        .sum();
                    let lse = rest.ln_1p();
                    row.iter_mut().for_each(|x| *x = (*x - max) - lse);
                }
                out
            }
            Op::NormalizeRows(a) => {
                let a = self.v(*a);
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let norm = l2(a.row(i));
                    if norm < 1e-12 {
                        return Err(Error::ZeroNorm { norm });
                    }
                    out.row_mut(i).iter_mut().for_each(|x| *x /= norm);
                }
                out
            }
            Op::LayerNormRows(a) => {
                let a = self.v(*a);
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let (mean, std) = mean_std(a.row(i));
                    out.row_mut(i)
                        .iter_mut()
                        .for_each(|x| *x = (*x - mean) / std);
                }
                out
            }
            Op::Clamp(a, lo, hi) => self.v(*a).map(|x| x.clamp(*lo, *hi)),
            Op::Transpose(a) => self.v(*a).transpose(),
            Op::Reshape(a, r, c) => {
                let a = self.v(*a);
                if a.len() != r * c {
                    return Err(shape_err(
                        "reshape",
                        format!("{:?} into {r}x{c}", a.shape()),
                    ));
                }
                Matrix::raw(*r, *c, a.as_slice().to_vec())
            }
            Op::StopGrad(a) => self.v(*a).clone(),
            Op::SliceRows(a, start, len) => self.v(*a).slice_rows(*start, *len)?,
            Op::GatherRows(a, idx) => self.v(*a).gather_rows(idx)?,
            Op::ConcatRows(parts) => {
                let cols = self.v(parts[0]).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let m = self.v(*p);
                    if m.cols() != cols {
                        return Err(shape_err(
                            "concat_rows",
                            format!("{} vs {} columns", m.cols(), cols),
                        ));
                    }
                    rows += m.rows();
                    data.extend_from_slice(m.as_slice());
                }
                Matrix::raw(rows, cols, data)
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        Ok(out)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b))
    }

    /// Adds a `1 x C` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x C` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.push(Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by entry `i` of an `R x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.push(Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.push(Op::Scale(a, factor))
    }

    pub fn shift(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.push(Op::Shift(a, offset))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Gelu(a))
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a)).expect("sum of finite values")
    }

    /// Per-row sums as an `R x 1` column.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::SumRows(a))
    }

    /// Row-wise log-softmax with max subtraction.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LogSoftmaxRows(a))
    }

    /// Divides each row by its L2 norm; fails with `ZeroNorm` below 1e-12.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::NormalizeRows(a))
    }

    /// Zero-mean unit-variance per row (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        self.push(Op::LayerNormRows(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.push(Op::Clamp(a, lo, hi))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        self.push(Op::Reshape(a, rows, cols))
    }

    /// Passes the value through; blocks all gradient flow into `a`.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        self.push(Op::StopGrad(a)).expect("copy of a finite value")
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.push(Op::SliceRows(a, start, len))
    }

    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.push(Op::GatherRows(a, indices))
    }

    pub fn concat_rows(&mut self, parts: Vec<Var>) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no parts"));
        }
        self.push(Op::ConcatRows(parts))
    }

    /// Adjoints of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.v(loss).shape() != (1, 1) {
            return Err(shape_err(
                "backward",
                format!("loss must be 1x1, got {:?}", self.v(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (idx, node) in self.nodes.iter().enumerate() {
            if !node.needs_grad {
                grads[idx] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[idx].value;
        let mut acc = |var: Var, contribution: Matrix| {
            if !self.nodes[var.0].needs_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                acc(*a, g.matmul(&bv.transpose()).expect("matmul shapes"));
                acc(*b, av.transpose().matmul(g).expect("matmul shapes"));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.v(*a), self.v(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y).expect("same shape"));
                acc(*b, g.zip_map(av, |x, y| x * y).expect("same shape"));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.v(*a), self.v(*row));
                acc(
                    *a,
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * rv.get(0, j)),
                );
                acc(
                    *row,
                    column_sums(&g.zip_map(av, |x, y| x * y).expect("same shape")),
                );
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.v(*a), self.v(*col));
                acc(
                    *a,
                    Matrix::from_fn(g.rows(), g.cols(), |i, j| g.get(i, j) * cv.get(i, 0)),
                );
                acc(
                    *col,
                    Matrix::from_fn(g.rows(), 1, |i, _| {
                        g.row(i).iter().zip(av.row(i)).map(|(x, y)| x * y).sum()
                    }),
                );
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::Shift(a, _) => acc(*a, g.clone()),
            Op::Exp(a) => acc(*a, g.zip_map(out, |x, y| x * y).expect("same shape")),
            Op::Log(a) => acc(*a, g.zip_map(self.v(*a), |x, y| x / y).expect("same shape")),
            Op::Gelu(a) => acc(
                *a,
                g.zip_map(self.v(*a), |x, y| x * gelu_grad(y))
                    .expect("same shape"),
            ),
            Op::Sum(a) => {
                let (r, c) = self.v(*a).shape();
                acc(*a, Matrix::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = self.v(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |i, _| g.get(i, 0)));
            }
            Op::LogSoftmaxRows(a) => {
                let mut dx = g.clone();
                for i in 0..out.rows() {
                    let gsum: f64 = g.row(i).iter().sum();
                    for (d, lp) in dx.row_mut(i).iter_mut().zip(out.row(i)) {
                        *d -= lp.exp() * gsum;
                    }
                }
                acc(*a, dx);
            }
            Op::NormalizeRows(a) => {
                let av = self.v(*a);
                let mut dx = g.clone();
                for i in 0..out.rows() {
                    let norm = l2(av.row(i));
                    let y = out.row(i);
                    let gy: f64 = g.row(i).iter().zip(y).map(|(p, q)| p * q).sum();
                    for (d, yk) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = (*d - yk * gy) / norm;
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNormRows(a) => {
                let av = self.v(*a);
                let mut dx = g.clone();
                let n = out.cols() as f64;
                for i in 0..out.rows() {
                    let (_, std) = mean_std(av.row(i));
                    let y = out.row(i);
                    let gmean = g.row(i).iter().sum::<f64>() / n;
                    let gymean = g.row(i).iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / n;
                    for (d, yk) in dx.row_mut(i).iter_mut().zip(y) {
                        *d = (*d - gmean - yk * gymean) / std;
                    }
                }
                acc(*a, dx);
            }
            Op::Clamp(a, lo, hi) => acc(
                *a,
                g.zip_map(
                    self.v(*a),
                    |x, y| if y >= *lo && y <= *hi { x } else { 0.0 },
                )
                .expect("same shape"),
            ),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Reshape(a, ..) => {
                let (r, c) = self.v(*a).shape();
                acc(*a, Matrix::raw(r, c, g.as_slice().to_vec()));
            }
            Op::SliceRows(a, start, len) => {
                let (r, c) = self.v(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                dx.as_mut_slice()[start * c..(start + len) * c].copy_from_slice(g.as_slice());
                acc(*a, dx);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.v(*a).shape();
                let mut dx = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    for (d, x) in dx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *d += x;
                    }
                }
                acc(*a, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = self.v(*p).rows();
                    acc(*p, g.slice_rows(start, rows).expect("concat layout"));
                    start += rows;
                }
            }
        }
    }
}

fn broadcast_row(
    a: &Matrix,
    row: &Matrix,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Matrix> {
    if row.shape() != (1, a.cols()) {
        return Err(shape_err(
            op,
            format!("{:?} with row {:?}", a.shape(), row.shape()),
        ));
    }
    Ok(Matrix::from_fn(a.rows(), a.cols(), |i, j| {
        f(a.get(i, j), row.get(0, j))
    }))
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, x) in out.row_mut(0).iter_mut().zip(g.row(i)) {
            *o += x;
        }
    }
    out
}

fn l2(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn mean_std(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, (var + LAYER_NORM_EPS).sqrt())
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
