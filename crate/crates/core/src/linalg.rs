//! Thin helpers over `faer` for the symmetric positive-definite work the estimators need.

use faer::linalg::cholesky::llt::factor::LltError;
use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, MatRef, Side};

use crate::error::{Error, Result};

/// Cholesky factor of a symmetric positive-definite matrix.
pub struct Chol {
    llt: Llt<f64>,
}

impl Chol {
    pub fn new(m: MatRef<'_, f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Dimension(format!("cholesky of a {}x{} matrix", m.nrows(), m.ncols())));
        }
        match m.llt(Side::Lower) {
            Ok(llt) => Ok(Chol { llt }),
            Err(LltError::NonPositivePivot { index }) => Err(Error::NotPositiveDefinite { pivot: Some(index) }),
        }
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    pub fn solve(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        self.llt.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let b = col_mat(rhs);
        let x = self.llt.solve(b.as_ref());
        (0..x.nrows()).map(|i| x[(i, 0)]).collect()
    }

    /// Lower-triangular factor `L` with `M = L Lᵀ`.
    pub fn lower(&self) -> Mat<f64> {
        self.llt.L().to_owned()
    }

    pub fn inverse(&self) -> Mat<f64> {
        let mut inv = self.llt.inverse();
        symmetrize(&mut inv);
        inv
    }
}

pub fn col_mat(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

/// Copies the lower triangle onto the upper one so the result is exactly symmetric.
pub fn symmetrize(m: &mut Mat<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Eigen-decomposition of a symmetric matrix; eigenvalues ascending.
pub fn sym_eigen(m: MatRef<'_, f64>) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigen-decomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let values = (0..s.nrows()).map(|i| s[i]).collect();
    Ok((values, evd.U().to_owned()))
}

pub fn sym_eigenvalues(m: MatRef<'_, f64>) -> Result<Vec<f64>> {
    m.self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| Error::Numerical(format!("eigenvalue computation failed: {e:?}")))
}

/// Row-major `Vec<Vec<f64>>` view for serialisation.
pub fn to_rows(m: MatRef<'_, f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::Dimension("ragged matrix rows".into()));
    }
    Ok(Mat::from_fn(n, p, |i, j| rows[i][j]))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Condition number of a symmetric positive-definite matrix from its eigenvalues;
/// infinite when it is not positive definite.
pub fn spd_condition(m: MatRef<'_, f64>) -> f64 {
    match sym_eigenvalues(m) {
        Ok(ev) if !ev.is_empty() => {
            let lo = ev[0];
            let hi = ev[ev.len() - 1];
            if lo <= 0.0 || !lo.is_finite() || !hi.is_finite() {
                f64::INFINITY
            } else {
                hi / lo
            }
        }
        _ => f64::INFINITY,
    }
}
