//! Dense row-major matrices and a small reverse-mode differentiation tape.
//!
//! Every learnable computation in the tracker (attention stacks, edge scorer,
//! losses) is expressed as operations on a [`Tape`]. The tape is rebuilt for
//! each forward pass; calling [`Tape::backward`] on a scalar output fills the
//! gradient of every ancestor.

use std::fmt;

use thiserror::Error;

/// Variance floor used by layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NumericError>;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            if r > 0 {
                write!(f, "; ")?;
            }
            for c in 0..self.cols {
                if c > 0 {
                    write!(f, ", ")?;
                }
                write!(f, "{:.6}", self.get(r, c))?;
            }
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericError::Shape {
                op: "from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single entry of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.shape(), (1, 1));
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(NumericError::Shape {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, k: f64) -> Matrix {
        self.map(|v| v * k)
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(NumericError::Shape {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.rows, b.rows);
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aki * bv;
            }
        }
    }
    out
}

/// `a · bᵀ` without materialising the transpose.
fn matmul_nt(a: &Matrix, b: &Matrix) -> Matrix {
    debug_assert_eq!(a.cols, b.cols);
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    out
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum whose result does not depend on the order of `values`: terms are
/// added in ascending order.
pub fn order_invariant_sum(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum()
}

fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in values.iter_mut() {
        *v = (*v - max).exp();
    }
    let total = order_invariant_sum(values);
    for v in values.iter_mut() {
        *v /= total;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn log_softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Layer normalisation of a single vector followed by the affine `gain ⊙ x̂ + bias`.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    if x.len() != gain.len() || x.len() != bias.len() {
        return Err(NumericError::Shape {
            op: "layer_norm",
            lhs: (1, x.len()),
            rhs: (gain.len(), bias.len()),
        });
    }
    let (xhat, _) = normalize(x);
    Ok(xhat
        .iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| v * g + b)
        .collect())
}

fn normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    (x.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Provenance of a tape value, used to route gradients backwards.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    SumAll(Var),
    RowSum(Var),
    SegmentSoftmax(Var, usize),
    SegmentSum(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    /// Scalar produced by an externally differentiated function of `input`.
    External { input: Var, grad: Matrix },
}

/// One recorded value together with its gradient slot and producing op.
#[derive(Debug, Clone)]
pub struct DiffNode {
    pub value: Matrix,
    pub gradient: Option<Matrix>,
    pub op: Op,
}

/// A per-forward-pass computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<DiffNode>,
}

macro_rules! same_shape {
    ($op:expr, $a:expr, $b:expr) => {
        if $a.shape() != $b.shape() {
            return Err(NumericError::Shape {
                op: $op,
                lhs: $a.shape(),
                rhs: $b.shape(),
            });
        }
    };
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(DiffNode {
            value,
            gradient: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last [`Tape::backward`] call, if the value
    /// is an ancestor of the differentiated output.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].gradient.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (am, rv) = (self.value(a), self.value(row));
        if rv.rows != 1 || rv.cols != am.cols {
            return Err(NumericError::Shape {
                op: "add_row",
                lhs: am.shape(),
                rhs: rv.shape(),
            });
        }
        let mut out = am.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Multiplies each row `r` of `a` by the scalar `col[r]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (am, cv) = (self.value(a), self.value(col));
        if cv.cols != 1 || cv.rows != am.rows {
            return Err(NumericError::Shape {
                op: "mul_col",
                lhs: am.shape(),
                rhs: cv.shape(),
            });
        }
        let mut out = am.clone();
        for r in 0..out.rows {
            let k = cv.data[r];
            for o in out.row_mut(r) {
                *o *= k;
            }
        }
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).scale(k);
        self.push(out, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push(out, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a))
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(log_sigmoid);
        self.push(out, Op::LogSigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let out = log_softmax_rows(self.value(a));
        self.push(out, Op::LogSoftmaxRows(a))
    }

    /// Normalises every row of `x`, then applies `gain` and `bias` (both `1 x cols`).
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.shape() != (1, xv.cols) || bv.shape() != (1, xv.cols) {
            return Err(NumericError::Shape {
                op: "layer_norm_rows",
                lhs: xv.shape(),
                rhs: gv.shape(),
            });
        }
        let mut xhat = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for r in 0..xv.rows {
            let (normed, is) = normalize(xv.row(r));
            inv_std.push(is);
            xhat.row_mut(r).copy_from_slice(&normed);
            for (c, v) in normed.iter().enumerate() {
                out.data[r * xv.cols + c] = v * gv.data[c] + bv.data[c];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    /// Sum across columns: `n x m -> n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let sums: Vec<f64> = (0..av.rows).map(|r| av.row(r).iter().sum()).collect();
        let out = Matrix::column_vector(&sums);
        self.push(out, Op::RowSum(a))
    }

    /// Softmax over consecutive blocks of `group` rows, independently per column.
    pub fn segment_softmax(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        if group == 0 || av.rows % group != 0 {
            return Err(NumericError::Shape {
                op: "segment_softmax",
                lhs: av.shape(),
                rhs: (group, 1),
            });
        }
        let mut out = av.clone();
        let mut buf = vec![0.0; group];
        for g in 0..av.rows / group {
            for c in 0..av.cols {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = av.get(g * group + i, c);
                }
                softmax_in_place(&mut buf);
                for (i, b) in buf.iter().enumerate() {
                    out.set(g * group + i, c, *b);
                }
            }
        }
        Ok(self.push(out, Op::SegmentSoftmax(a, group)))
    }

    /// Sums consecutive blocks of `group` rows: `(g·group) x m -> g x m`.
    /// Each block sum is independent of the row order inside the block.
    pub fn segment_sum(&mut self, a: Var, group: usize) -> Result<Var> {
        let av = self.value(a);
        if group == 0 || av.rows % group != 0 {
            return Err(NumericError::Shape {
                op: "segment_sum",
                lhs: av.shape(),
                rhs: (group, 1),
            });
        }
        let mut out = Matrix::zeros(av.rows / group, av.cols);
        let mut buf = vec![0.0; group];
        for g in 0..av.rows / group {
            for c in 0..av.cols {
                for (i, b) in buf.iter_mut().enumerate() {
                    *b = av.data[(g * group + i) * av.cols + c];
                }
                out.data[g * av.cols + c] = order_invariant_sum(&buf);
            }
        }
        Ok(self.push(out, Op::SegmentSum(a, group)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.value(p).rows);
        let mut cols = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows != rows {
                return Err(NumericError::Shape {
                    op: "concat_cols",
                    lhs: (rows, cols),
                    rhs: pv.shape(),
                });
            }
            cols += pv.cols;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let pv = self.value(p);
                out.data[r * cols + offset..r * cols + offset + pv.cols].copy_from_slice(pv.row(r));
                offset += pv.cols;
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols != cols {
                return Err(NumericError::Shape {
                    op: "concat_rows",
                    lhs: (rows, cols),
                    rhs: pv.shape(),
                });
            }
            rows += pv.rows;
            data.extend_from_slice(&pv.data);
        }
        Ok(self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols {
            return Err(NumericError::Shape {
                op: "slice_cols",
                lhs: av.shape(),
                rhs: (start, len),
            });
        }
        let mut out = Matrix::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= av.rows) {
            return Err(NumericError::Shape {
                op: "gather_rows",
                lhs: av.shape(),
                rhs: (bad, 1),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * av.cols);
        for &i in indices {
            data.extend_from_slice(av.row(i));
        }
        let out = Matrix {
            rows: indices.len(),
            cols: av.cols,
            data,
        };
        Ok(self.push(out, Op::GatherRows(a, indices.to_vec())))
    }

    /// Row-major reinterpretation with a new shape of equal size.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let av = self.value(a);
        if av.len() != rows * cols {
            return Err(NumericError::Shape {
                op: "reshape",
                lhs: av.shape(),
                rhs: (rows, cols),
            });
        }
        let out = Matrix {
            rows,
            cols,
            data: av.data.clone(),
        };
        Ok(self.push(out, Op::Reshape(a)))
    }

    /// Records a scalar `value` computed outside the tape, whose gradient with
    /// respect to `input` is `grad` (same shape as `input`).
    pub fn external_scalar(&mut self, input: Var, value: f64, grad: Matrix) -> Result<Var> {
        same_shape!("external_scalar", self.value(input), grad);
        Ok(self.push(Matrix::scalar(value), Op::External { input, grad }))
    }

    /// Reverse sweep from a `1 x 1` output. Clears all previous gradients first.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.shape(output);
        if shape != (1, 1) {
            return Err(NumericError::Contract(format!(
                "backward requires a scalar output, got {}x{}",
                shape.0, shape.1
            )));
        }
        for node in &mut self.nodes {
            node.gradient = None;
        }
        self.nodes[output.0].gradient = Some(Matrix::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = self.nodes[idx].gradient.take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.nodes[idx].gradient = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Matrix) {
        let slot = &mut self.nodes[v.0].gradient;
        match slot {
            Some(existing) => existing.add_assign(&g),
            None => *slot = Some(g),
        }
    }

    fn propagate(&mut self, idx: usize, g: &Matrix) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = matmul_nt(g, self.value(b));
                let gb = matmul_tn(self.value(a), g);
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::AddRow(a, row) => {
                let mut gr = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(a, g.clone());
                self.accumulate(row, gr);
            }
            Op::Sub(a, b) => {
                self.accumulate(a, g.clone());
                self.accumulate(b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let ga = g.hadamard(self.value(b)).expect("shape");
                let gb = g.hadamard(self.value(a)).expect("shape");
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::MulCol(a, col) => {
                let av = self.value(a);
                let cv = self.value(col);
                let mut ga = g.clone();
                let mut gc = Matrix::zeros(cv.rows, 1);
                for r in 0..g.rows {
                    gc.data[r] = dot(g.row(r), av.row(r));
                    let k = cv.data[r];
                    for v in ga.row_mut(r) {
                        *v *= k;
                    }
                }
                self.accumulate(a, ga);
                self.accumulate(col, gc);
            }
            Op::Scale(a, k) => self.accumulate(a, g.scale(k)),
            Op::AddScalar(a) => self.accumulate(a, g.clone()),
            Op::Transpose(a) => self.accumulate(a, g.transpose()),
            Op::Relu(a) => {
                let ga = self
                    .value(a)
                    .zip_with(g, "relu", |x, gv| if x > 0.0 { gv } else { 0.0 })
                    .expect("shape");
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let ga = self.nodes[idx].value.hadamard(g).expect("shape");
                self.accumulate(a, ga);
            }
            Op::Ln(a) => {
                let ga = g.zip_with(self.value(a), "ln", |gv, x| gv / x).expect("shape");
                self.accumulate(a, ga);
            }
            Op::Abs(a) => {
                let ga = g
                    .zip_with(self.value(a), "abs", |gv, x| {
                        if x > 0.0 {
                            gv
                        } else if x < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .expect("shape");
                self.accumulate(a, ga);
            }
            Op::LogSigmoid(a) => {
                // d/dx log σ(x) = σ(-x)
                let ga = g
                    .zip_with(self.value(a), "log_sigmoid", |gv, x| gv * sigmoid(-x))
                    .expect("shape");
                self.accumulate(a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = dot(yr, gr);
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - inner);
                    }
                }
                self.accumulate(a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = gr[c] - y.get(r, c).exp() * total;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(gain).clone();
                let n = xhat.cols as f64;
                let mut gx = Matrix::zeros(xhat.rows, xhat.cols);
                let mut ggain = Matrix::zeros(1, xhat.cols);
                let mut gbias = Matrix::zeros(1, xhat.cols);
                for r in 0..xhat.rows {
                    let gr = g.row(r);
                    let xr = xhat.row(r);
                    let dxhat: Vec<f64> = gr.iter().zip(&gv.data).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dot(&dxhat, xr) / n;
                    for c in 0..xhat.cols {
                        gx.data[r * xhat.cols + c] = inv_std[r] * (dxhat[c] - mean_d - xr[c] * mean_dx);
                        ggain.data[c] += gr[c] * xr[c];
                        gbias.data[c] += gr[c];
                    }
                }
                self.accumulate(x, gx);
                self.accumulate(gain, ggain);
                self.accumulate(bias, gbias);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(a, Matrix::filled(r, c, g.item()));
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).fill(g.data[i]);
                }
                self.accumulate(a, ga);
            }
            Op::SegmentSoftmax(a, group) => {
                let y = &self.nodes[idx].value;
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for gi in 0..y.rows / group {
                    for c in 0..y.cols {
                        let mut inner = 0.0;
                        for i in 0..group {
                            let r = gi * group + i;
                            inner += y.get(r, c) * g.get(r, c);
                        }
                        for i in 0..group {
                            let r = gi * group + i;
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - inner));
                        }
                    }
                }
                self.accumulate(a, ga);
            }
            Op::SegmentSum(a, group) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).copy_from_slice(g.row(i / group));
                }
                self.accumulate(a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    let mut gp = Matrix::zeros(r, c);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + c]);
                    }
                    offset += c;
                    self.accumulate(p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = self.shape(p);
                    let gp = Matrix {
                        rows: r,
                        cols: c,
                        data: g.data[offset * c..(offset + r) * c].to_vec(),
                    };
                    offset += r;
                    self.accumulate(p, gp);
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[start..start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(a, ga);
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = self.shape(a);
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(a);
                let ga = Matrix {
                    rows: r,
                    cols: c,
                    data: g.data.clone(),
                };
                self.accumulate(a, ga);
            }
            Op::External { input, grad } => {
                self.accumulate(input, grad.scale(g.item()));
            }
        }
    }
}
