//! Small dense helpers shared by the fitting and variance code.

use nalgebra::{DMatrix, DVector};

/// Condition number above which a matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Accumulates `X'X` and `X'y` one row at a time.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    dim: usize,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    rows: usize,
}

impl NormalEquations {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            xtx: DMatrix::zeros(dim, dim),
            xty: DVector::zeros(dim),
            rows: 0,
        }
    }

    #[inline]
    pub fn add(&mut self, x: &[f64], y: f64) {
        debug_assert_eq!(x.len(), self.dim);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            self.xty[j] += xj * y;
            for (k, &xk) in x.iter().enumerate().skip(j) {
                self.xtx[(j, k)] += xj * xk;
            }
        }
        self.rows += 1;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Symmetric `X'X`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = self.xtx.clone();
        for j in 0..self.dim {
            for k in 0..j {
                g[(j, k)] = g[(k, j)];
            }
        }
        g
    }

    pub fn xty(&self) -> &DVector<f64> {
        &self.xty
    }

    /// Solves the normal equations. Returns `Err(condition)` when `X'X` is
    /// singular or its condition number exceeds [`MAX_CONDITION`].
    pub fn solve(&self) -> Result<DVector<f64>, f64> {
        solve_spd(&self.gram(), &self.xty)
    }
}

/// Condition number of a symmetric positive semidefinite matrix from its
/// eigenvalues; infinite when the smallest is not positive.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn solve_spd(gram: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>, f64> {
    let cond = spd_condition(gram);
    if cond > MAX_CONDITION {
        return Err(cond);
    }
    match gram.clone().cholesky() {
        Some(ch) => Ok(ch.solve(rhs)),
        None => Err(f64::INFINITY),
    }
}

/// 2-norm condition number of a general square matrix.
pub fn condition(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 0.0) || !max.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a square matrix, refusing ill-conditioned input.
pub fn checked_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>, f64> {
    let cond = condition(m);
    if cond > MAX_CONDITION {
        return Err(cond);
    }
    m.clone().lu().try_inverse().ok_or(f64::INFINITY)
}

/// `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(r, c, |i, j| rows[i][j])
}
