//! Small dense linear algebra kernels.
//!
//! Everything here works on row-major `f64` storage. The only factorization
//! is a Householder QR used for ordinary least squares in the autoregressive
//! fits; there is no attempt at general BLAS coverage.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative tolerance on the diagonal of `R` below which a least-squares
/// design is treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("design matrix is rank deficient (|R_jj| = {diag:e} at column {column})")]
    RankDeficient { column: usize, diag: f64 },
    #[error("empty input")]
    Empty,
    #[error("underdetermined system: {rows} rows < {cols} columns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("non-finite entry")]
    NonFinite,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        norm2(&self.data)
    }
}

/// `m · v`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if m.cols != v.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: m.cols,
            got: v.len(),
        });
    }
    Ok((0..m.rows).map(|r| dot(m.row(r), v)).collect())
}

/// `mᵀ · v`.
pub fn matvec_t(m: &Matrix, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if m.rows != v.len() {
        return Err(LinalgError::DimensionMismatch {
            expected: m.rows,
            got: v.len(),
        });
    }
    let mut out = vec![0.0; m.cols];
    for (r, &vr) in v.iter().enumerate() {
        axpy(vr, m.row(r), &mut out);
    }
    Ok(out)
}

/// Unchecked `out = m · v` for hot loops where shapes are already validated.
#[inline]
pub(crate) fn matvec_into(m: &Matrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.cols, v.len());
    debug_assert_eq!(m.rows, out.len());
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), v);
    }
}

/// Unchecked `out += mᵀ · v`.
#[inline]
pub(crate) fn matvec_t_acc(m: &Matrix, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(m.rows, v.len());
    debug_assert_eq!(m.cols, out.len());
    for (r, &vr) in v.iter().enumerate() {
        if vr != 0.0 {
            axpy(vr, m.row(r), out);
        }
    }
}

/// `g += scale · u vᵀ`.
#[inline]
pub(crate) fn outer_acc(g: &mut Matrix, scale: f64, u: &[f64], v: &[f64]) {
    debug_assert_eq!(g.rows, u.len());
    debug_assert_eq!(g.cols, v.len());
    for (r, &ur) in u.iter().enumerate() {
        let s = scale * ur;
        if s != 0.0 {
            axpy(s, v, g.row_mut(r));
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += a · x`.
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Solves `min ‖Ax − b‖₂` by Householder QR.
///
/// Fails with [`LinalgError::RankDeficient`] when some diagonal entry of `R`
/// falls below [`RANK_TOL`] times the largest one.
pub fn least_squares(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let (m, n) = (a.rows, a.cols);
    if b.len() != m {
        return Err(LinalgError::DimensionMismatch {
            expected: m,
            got: b.len(),
        });
    }
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    if m < n {
        return Err(LinalgError::Underdetermined { rows: m, cols: n });
    }
    if a.data.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }

    // Column-major working copy: each Householder step touches whole columns.
    let mut q: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..m).map(|r| a.get(r, c)).collect())
        .collect();
    let mut rhs = b.to_vec();
    let mut diag = vec![0.0; n];

    for k in 0..n {
        let col = &mut q[k];
        let alpha = norm2(&col[k..]);
        if alpha == 0.0 {
            diag[k] = 0.0;
            continue;
        }
        let alpha = if col[k] > 0.0 { -alpha } else { alpha };
        // v = x − alpha e₁, stored in place of the column.
        col[k] -= alpha;
        let vnorm2 = dot(&col[k..], &col[k..]);
        diag[k] = alpha;
        if vnorm2 == 0.0 {
            continue;
        }
        let v: Vec<f64> = col[k..].to_vec();
        for c in q.iter_mut().skip(k + 1) {
            let s = 2.0 * dot(&v, &c[k..]) / vnorm2;
            axpy(-s, &v, &mut c[k..]);
        }
        let s = 2.0 * dot(&v, &rhs[k..]) / vnorm2;
        axpy(-s, &v, &mut rhs[k..]);
    }

    let rmax = diag.iter().fold(0.0_f64, |acc, d| acc.max(d.abs()));
    for (k, d) in diag.iter().enumerate() {
        if !(d.abs() > RANK_TOL * rmax) {
            return Err(LinalgError::RankDeficient {
                column: k,
                diag: d.abs(),
            });
        }
    }

    // Back substitution on the upper triangle; R[i][j] lives in q[j][i] for j > i.
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for j in i + 1..n {
            s -= q[j][i] * x[j];
        }
        x[i] = s / diag[i];
    }
    Ok(x)
}

/// Indices of columns that are linearly independent of the columns before
/// them, scanning left to right. A column is dependent when its component
/// orthogonal to the kept columns has norm at most `rel_tol` times its own.
pub fn independent_columns(a: &Matrix, rel_tol: f64) -> Vec<usize> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut kept = Vec::new();
    for c in 0..a.cols {
        let mut v: Vec<f64> = (0..a.rows).map(|r| a.get(r, c)).collect();
        let original = norm2(&v);
        if original == 0.0 {
            continue;
        }
        // Two Gram–Schmidt passes for numerical orthogonality.
        for _ in 0..2 {
            for q in &basis {
                let s = dot(q, &v);
                axpy(-s, q, &mut v);
            }
        }
        let rest = norm2(&v);
        if rest > rel_tol * original {
            v.iter_mut().for_each(|x| *x /= rest);
            basis.push(v);
            kept.push(c);
        }
    }
    kept
}

/// Softmax with max subtraction.
pub fn softmax_stable(v: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if v.is_empty() {
        return Err(LinalgError::Empty);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// In-place softmax over a nonempty finite slice.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}

pub fn logsumexp(v: &[f64]) -> Result<f64, LinalgError> {
    if v.is_empty() {
        return Err(LinalgError::Empty);
    }
    if v.len() == 1 {
        return Ok(v[0]);
    }
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    Ok(mx + v.iter().map(|x| (x - mx).exp()).sum::<f64>().ln())
}
