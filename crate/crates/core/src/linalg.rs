//! Dense double-precision matrix kernels.
//!
//! Everything here is row-major `f64`. The matrices involved in the
//! matrix-tree computation are at most a few hundred rows wide, so the
//! kernels are plain loops with partial pivoting and no blocking.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::ops::{Index, IndexMut};

use thiserror::Error;

/// Pivots with magnitude below this are treated as singular.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("singular matrix: pivot {pivot:e} at column {column}")]
    SingularMatrix { pivot: f64, column: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

/// Row-major dense matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite { index });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Internal constructor for computed values; skips the finiteness scan.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::ShapeMismatch {
                    expected: (rows.len(), cols),
                    got: (rows.len(), r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix::from_raw(rows, cols, vec![value; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix::from_raw(rows, cols, data)
    }

    /// A 1×n row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix::from_raw(1, values.len(), values.to_vec())
    }

    /// An n×1 column vector.
    pub fn col_vector(values: &[f64]) -> Self {
        Matrix::from_raw(values.len(), 1, values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Matrix::from_raw(1, 1, vec![value])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// The single value of a 1×1 matrix.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a non-scalar matrix");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::ShapeMismatch {
                expected: (self.cols, rhs.cols),
                got: rhs.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, LinalgError> {
        self.expect_shape(other.shape())?;
        Ok(Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        ))
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_shape(&self, shape: (usize, usize)) -> Result<(), LinalgError> {
        if self.shape() != shape {
            return Err(LinalgError::ShapeMismatch {
                expected: shape,
                got: self.shape(),
            });
        }
        Ok(())
    }

    /// Convenience: factor and invert.
    pub fn inverse(&self) -> Result<Matrix, LinalgError> {
        Ok(inverse(&lu_decompose(self)?))
    }

    /// Convenience: factor and take the determinant.
    pub fn determinant(&self) -> Result<f64, LinalgError> {
        Ok(determinant(&lu_decompose(self)?))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Packed LU factors of a row-permuted matrix: `P·A = L·U` with unit
/// lower-triangular `L` stored below the diagonal of `lu`.
#[derive(Debug, Clone, PartialEq)]
pub struct LuFactors {
    pub lu: Matrix,
    /// `pivots[i]` is the original row that ended up in row `i`.
    pub pivots: Vec<usize>,
    /// Sign of the permutation, `+1.0` or `-1.0`.
    pub parity: f64,
}

impl LuFactors {
    pub fn dim(&self) -> usize {
        self.lu.rows()
    }

    /// Unit lower-triangular factor.
    pub fn lower(&self) -> Matrix {
        let n = self.dim();
        Matrix::from_fn(n, n, |r, c| match r.cmp(&c) {
            core::cmp::Ordering::Greater => self.lu[(r, c)],
            core::cmp::Ordering::Equal => 1.0,
            core::cmp::Ordering::Less => 0.0,
        })
    }

    pub fn upper(&self) -> Matrix {
        let n = self.dim();
        Matrix::from_fn(n, n, |r, c| if r <= c { self.lu[(r, c)] } else { 0.0 })
    }

    /// Applies the row permutation to `a`, giving `P·a`.
    pub fn permute_rows(&self, a: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), a.cols(), |r, c| a[(self.pivots[r], c)])
    }

    /// Solves `A·X = B` for `X`.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix, LinalgError> {
        let n = self.dim();
        if b.rows() != n {
            return Err(LinalgError::ShapeMismatch {
                expected: (n, b.cols()),
                got: b.shape(),
            });
        }
        let mut x = self.permute_rows(b);
        let k = b.cols();
        // forward substitution with unit diagonal
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[(i, j)];
                if l != 0.0 {
                    for c in 0..k {
                        x[(i, c)] -= l * x[(j, c)];
                    }
                }
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[(i, j)];
                if u != 0.0 {
                    for c in 0..k {
                        x[(i, c)] -= u * x[(j, c)];
                    }
                }
            }
            let d = self.lu[(i, i)];
            for c in 0..k {
                x[(i, c)] /= d;
            }
        }
        Ok(x)
    }
}

/// Partial-pivoting LU factorization.
pub fn lu_decompose(a: &Matrix) -> Result<LuFactors, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    if let Some(index) = a.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite { index });
    }
    let n = a.rows();
    let mut lu = a.clone();
    let mut pivots: Vec<usize> = (0..n).collect();
    let mut parity = 1.0;

    for k in 0..n {
        // first row with the largest magnitude wins ties, keeping this deterministic
        let mut best = k;
        let mut best_mag = libm::fabs(lu[(k, k)]);
        for r in k + 1..n {
            let mag = libm::fabs(lu[(r, k)]);
            if mag > best_mag {
                best = r;
                best_mag = mag;
            }
        }
        if best_mag < PIVOT_THRESHOLD {
            return Err(LinalgError::SingularMatrix {
                pivot: best_mag,
                column: k,
            });
        }
        if best != k {
            for c in 0..n {
                let tmp = lu[(k, c)];
                lu[(k, c)] = lu[(best, c)];
                lu[(best, c)] = tmp;
            }
            pivots.swap(k, best);
            parity = -parity;
        }
        let pivot = lu[(k, k)];
        for r in k + 1..n {
            let factor = lu[(r, k)] / pivot;
            lu[(r, k)] = factor;
            if factor != 0.0 {
                for c in k + 1..n {
                    lu[(r, c)] -= factor * lu[(k, c)];
                }
            }
        }
    }
    Ok(LuFactors { lu, pivots, parity })
}

pub fn determinant(f: &LuFactors) -> f64 {
    (0..f.dim()).fold(f.parity, |acc, i| acc * f.lu[(i, i)])
}

/// `ln |det A|` and the sign of `det A`. Stays finite where the plain
/// product would underflow.
pub fn log_abs_determinant(f: &LuFactors) -> (f64, f64) {
    let mut sign = f.parity;
    let mut log = 0.0;
    for i in 0..f.dim() {
        let d = f.lu[(i, i)];
        if d < 0.0 {
            sign = -sign;
        }
        log += libm::log(libm::fabs(d));
    }
    (log, sign)
}

pub fn inverse(f: &LuFactors) -> Matrix {
    f.solve(&Matrix::identity(f.dim()))
        .expect("identity has matching dimension")
}
