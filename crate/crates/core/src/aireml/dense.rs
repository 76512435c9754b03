//! Reference engine: factorises the full `n × n` covariance matrix.

use faer::Mat;

use super::{Derivatives, RemlEvaluation};
use crate::error::Result;
use crate::linalg::{col_mat, dot, symmetrize, Chol};
use crate::model::{CovarianceStructure, VarianceComponents};

pub struct DenseEngine<'s, 'g> {
    structure: &'s CovarianceStructure<'g>,
    y: Vec<f64>,
    a: Mat<f64>,
}

impl<'s, 'g> DenseEngine<'s, 'g> {
    pub fn new(structure: &'s CovarianceStructure<'g>, y: &[f64], a: &Mat<f64>) -> Self {
        DenseEngine { structure, y: y.to_vec(), a: a.clone() }
    }

    pub fn evaluate(&self, theta: &VarianceComponents, derivs: bool) -> Result<RemlEvaluation> {
        let n = self.y.len();
        let q = self.a.ncols();
        let v = self.structure.assemble_v(theta);
        let chol_v = Chol::new(v.as_ref())?;
        let va = chol_v.solve(self.a.as_ref());
        let vy = chol_v.solve_vec(&self.y);

        let mut ca = self.a.transpose() * &va;
        symmetrize(&mut ca);
        let chol_a = Chol::new(ca.as_ref())?;
        let aty: Vec<f64> = (0..q).map(|l| (0..n).map(|r| self.a[(r, l)] * vy[r]).sum()).collect();
        let beta = chol_a.solve_vec(&aty);
        let py: Vec<f64> = (0..n).map(|r| vy[r] - (0..q).map(|l| va[(r, l)] * beta[l]).sum::<f64>()).collect();
        let loglik = -0.5 * (dot(&self.y, &py) + chol_v.log_det() + chol_a.log_det());
        if !derivs {
            return Ok(RemlEvaluation { loglik, beta, derivs: None });
        }

        // P = V⁻¹ − V⁻¹A (AᵀV⁻¹A)⁻¹ AᵀV⁻¹
        let ca_inv_vat = chol_a.solve(va.transpose());
        let mut p = chol_v.inverse();
        p -= &va * &ca_inv_vat;
        symmetrize(&mut p);

        let f: Vec<Vec<f64>> = (0..5).map(|s| self.structure.apply(s, &py)).collect();
        let pf: Vec<Vec<f64>> = f
            .iter()
            .map(|fs| {
                let m = &p * col_mat(fs);
                (0..n).map(|r| m[(r, 0)]).collect()
            })
            .collect();
        let mut gradient = [0.0; 5];
        let mut ai = [[0.0; 5]; 5];
        for s in 0..5 {
            let tr = self.structure.trace_product(s, &p);
            gradient[s] = -0.5 * (tr - dot(&py, &f[s]));
            for k in s..5 {
                let v = -0.5 * dot(&f[s], &pf[k]);
                ai[s][k] = v;
                ai[k][s] = v;
            }
        }
        Ok(RemlEvaluation { loglik, beta, derivs: Some(Derivatives { gradient, ai }) })
    }
}
