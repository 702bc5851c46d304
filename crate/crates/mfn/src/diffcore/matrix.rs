//! Dense row-major f64 matrices and the numeric kernels shared by the plain
//! and differentiable code paths.
//!
//! Accumulation order is fixed everywhere (row-major traversal, inner loop
//! over the shared dimension, left to right) so results are bit-reproducible.

use crate::error::{MfnError, Result};

/// A dense `rows x cols` matrix of f64 values in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows in from_rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// A 1x1 matrix holding a single scalar.
    pub fn scalar(v: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    /// A 1xN row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        debug_assert!(i < self.rows);
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        debug_assert!(i < self.rows);
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single value of a 1x1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on a {}x{} matrix", self.rows, self.cols);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Maximum absolute difference against another matrix of the same shape.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
fn check_finite(op: &'static str, m: &Matrix) {
    debug_assert!(m.is_finite(), "{op} produced a non-finite entry");
}

fn dim_err(op: &'static str, a: &Matrix, b: &Matrix) -> MfnError {
    MfnError::Dim {
        op,
        lhs_rows: a.rows,
        lhs_cols: a.cols,
        rhs_rows: b.rows,
        rhs_cols: b.cols,
    }
}

/// Matrix product. Accumulates over the shared dimension left to right.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(dim_err("matmul", a, b));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    check_finite("matmul", &out);
    Ok(out)
}

pub fn transpose(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.cols, x.rows);
    for i in 0..x.rows {
        for j in 0..x.cols {
            out.data[j * x.rows + i] = x.data[i * x.cols + j];
        }
    }
    out
}

/// Row-wise softmax with the max-shift stabilization.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    assert!(x.numel() > 0, "softmax_rows on an empty matrix");
    let mut out = Matrix::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let row = x.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..x.cols {
            let e = (row[j] - max).exp();
            out.data[i * x.cols + j] = e;
            sum += e;
        }
        for j in 0..x.cols {
            out.data[i * x.cols + j] /= sum;
        }
    }
    check_finite("softmax_rows", &out);
    out
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Elementwise x * sigmoid(x).
pub fn swish(x: &Matrix) -> Matrix {
    let out = x.map(|v| v * sigmoid_scalar(v));
    check_finite("swish", &out);
    out
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    let out = x.map(sigmoid_scalar);
    check_finite("sigmoid", &out);
    out
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(dim_err("add", a, b));
    }
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
    let out = Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    };
    check_finite("add", &out);
    Ok(out)
}

pub fn sub(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(dim_err("sub", a, b));
    }
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x - y).collect();
    let out = Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    };
    check_finite("sub", &out);
    Ok(out)
}

pub fn mul_elem(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(dim_err("mul_elem", a, b));
    }
    let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
    let out = Matrix {
        rows: a.rows,
        cols: a.cols,
        data,
    };
    check_finite("mul_elem", &out);
    Ok(out)
}

pub fn scale(x: &Matrix, c: f64) -> Matrix {
    let out = x.map(|v| v * c);
    check_finite("scale", &out);
    out
}

/// Natural log with the argument clamped to at least `floor` (entropy
/// convention: the clamp keeps 0 * ln 0 at 0).
pub fn ln_clamped(x: &Matrix, floor: f64) -> Matrix {
    let out = x.map(|v| v.max(floor).ln());
    check_finite("ln_clamped", &out);
    out
}

pub fn sum_all(x: &Matrix) -> f64 {
    let mut acc = 0.0;
    for &v in &x.data {
        acc += v;
    }
    acc
}

/// Column means: an RxC matrix reduces to 1xC.
pub fn col_mean(x: &Matrix) -> Matrix {
    assert!(x.rows > 0, "col_mean on an empty matrix");
    let mut out = Matrix::zeros(1, x.cols);
    for i in 0..x.rows {
        for j in 0..x.cols {
            out.data[j] += x.data[i * x.cols + j];
        }
    }
    let inv = 1.0 / x.rows as f64;
    for v in &mut out.data {
        *v *= inv;
    }
    check_finite("col_mean", &out);
    out
}

/// Horizontal concatenation: RxA | RxB -> Rx(A+B).
pub fn concat_cols(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(dim_err("concat_cols", a, b));
    }
    let cols = a.cols + b.cols;
    let mut data = Vec::with_capacity(a.rows * cols);
    for i in 0..a.rows {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Ok(Matrix {
        rows: a.rows,
        cols,
        data,
    })
}

/// Vertical stack of any number of matrices with equal column counts.
pub fn stack_rows(parts: &[&Matrix]) -> Result<Matrix> {
    assert!(!parts.is_empty(), "stack_rows needs at least one part");
    let cols = parts[0].cols;
    for p in parts.iter().skip(1) {
        if p.cols != cols {
            return Err(dim_err("stack_rows", parts[0], p));
        }
    }
    let rows: usize = parts.iter().map(|p| p.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(&p.data);
    }
    Ok(Matrix { rows, cols, data })
}

/// Repeat a 1xC row n times into an nxC matrix.
pub fn broadcast_row(row: &Matrix, n: usize) -> Result<Matrix> {
    if row.rows != 1 {
        return Err(MfnError::Contract(format!(
            "broadcast_row expects a 1xC row, got {}x{}",
            row.rows, row.cols
        )));
    }
    let mut data = Vec::with_capacity(n * row.cols);
    for _ in 0..n {
        data.extend_from_slice(&row.data);
    }
    Ok(Matrix {
        rows: n,
        cols: row.cols,
        data,
    })
}

/// x + row broadcast over every row of x.
pub fn add_row_broadcast(x: &Matrix, row: &Matrix) -> Result<Matrix> {
    if row.rows != 1 || row.cols != x.cols {
        return Err(dim_err("add_row_broadcast", x, row));
    }
    let mut out = x.clone();
    for i in 0..x.rows {
        for j in 0..x.cols {
            out.data[i * x.cols + j] += row.data[j];
        }
    }
    check_finite("add_row_broadcast", &out);
    Ok(out)
}
