//! Exact engine in the `2N`-dimensional subject space.
//!
//! With `G = QΛQᵀ` and `Ũ = [E T]·blockdiag(Q, Q)` (record-to-subject indicator `E`,
//! time-weighted indicator `T`), the covariance is `V = σ²_e I + Ũ D Ũᵀ` where
//! `D = diag(σ²_g Λ + σ²_b0, σ²_g* Λ + σ²_b1)`. Every quantity the estimator needs follows
//! from Woodbury identities on `S = σ²_e I + D^½ ŨᵀŨ D^½`, so an iteration costs `O(N³ + nN)`
//! regardless of the number of records per subject.

use faer::Mat;

use super::{Derivatives, RemlEvaluation};
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eigen, symmetrize, Chol};
use crate::model::{CovarianceStructure, VarianceComponents};

/// Eigenvalues of the GRM below `-NEGATIVE_EIGEN_TOL · max(λ_max, 1)` rule this engine out.
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-6;

pub struct LowRankEngine {
    y: Vec<f64>,
    a: Mat<f64>,
    times: Vec<f64>,
    offsets: Vec<usize>,
    q: Mat<f64>,
    lambda: Vec<f64>,
    /// `ŨᵀŨ`, fixed for the whole fit.
    gram: Mat<f64>,
}

struct Workspace {
    sigma2_e: f64,
    omega: Vec<f64>,
    s_chol: Chol,
}

impl LowRankEngine {
    /// `None` when the GRM is materially indefinite.
    pub fn new(structure: &CovarianceStructure<'_>, y: &[f64], a: &Mat<f64>) -> Result<Option<Self>> {
        let (mut lambda, q) = sym_eigen(structure.grm().values().as_ref())?;
        let top = lambda.last().copied().unwrap_or(0.0).max(1.0);
        if lambda.first().is_some_and(|&l| l < -NEGATIVE_EIGEN_TOL * top) {
            return Ok(None);
        }
        lambda.iter_mut().for_each(|l| *l = l.max(0.0));

        let nsub = structure.n_subjects();
        let offsets = structure.offsets().to_vec();
        let times = structure.times().to_vec();
        let mut cnt = vec![0.0; nsub];
        let mut s1 = vec![0.0; nsub];
        let mut s2 = vec![0.0; nsub];
        for i in 0..nsub {
            for &t in &times[offsets[i]..offsets[i + 1]] {
                cnt[i] += 1.0;
                s1[i] += t;
                s2[i] += t * t;
            }
        }
        let rotate = |w: &[f64]| -> Mat<f64> {
            let scaled = Mat::from_fn(nsub, nsub, |i, j| w[i] * q[(i, j)]);
            q.transpose() * scaled
        };
        let (b11, b12, b22) = (rotate(&cnt), rotate(&s1), rotate(&s2));
        let mut gram = Mat::from_fn(2 * nsub, 2 * nsub, |r, c| match (r < nsub, c < nsub) {
            (true, true) => b11[(r, c)],
            (true, false) => b12[(r, c - nsub)],
            (false, true) => b12[(c, r - nsub)],
            (false, false) => b22[(r - nsub, c - nsub)],
        });
        symmetrize(&mut gram);
        Ok(Some(LowRankEngine { y: y.to_vec(), a: a.clone(), times, offsets, q, lambda, gram }))
    }

    fn nsub(&self) -> usize {
        self.lambda.len()
    }

    /// `Ũᵀx`.
    fn ut(&self, x: &[f64]) -> Vec<f64> {
        let nsub = self.nsub();
        let mut su = vec![0.0; nsub];
        let mut st = vec![0.0; nsub];
        for i in 0..nsub {
            for r in self.offsets[i]..self.offsets[i + 1] {
                su[i] += x[r];
                st[i] += self.times[r] * x[r];
            }
        }
        let mut out = vec![0.0; 2 * nsub];
        for j in 0..nsub {
            let mut a = 0.0;
            let mut b = 0.0;
            for i in 0..nsub {
                a += self.q[(i, j)] * su[i];
                b += self.q[(i, j)] * st[i];
            }
            out[j] = a;
            out[nsub + j] = b;
        }
        out
    }

    /// `Ũz`.
    fn u(&self, z: &[f64]) -> Vec<f64> {
        let nsub = self.nsub();
        let mut w1 = vec![0.0; nsub];
        let mut w2 = vec![0.0; nsub];
        for j in 0..nsub {
            let (z1, z2) = (z[j], z[nsub + j]);
            for i in 0..nsub {
                w1[i] += self.q[(i, j)] * z1;
                w2[i] += self.q[(i, j)] * z2;
            }
        }
        let mut out = vec![0.0; self.y.len()];
        for i in 0..nsub {
            for r in self.offsets[i]..self.offsets[i + 1] {
                out[r] = w1[i] + self.times[r] * w2[i];
            }
        }
        out
    }

    fn workspace(&self, theta: &VarianceComponents) -> Result<Workspace> {
        let th = theta.to_array();
        if th.iter().any(|v| *v < 0.0) || th[4] <= 0.0 {
            return Err(Error::NotPositiveDefinite { pivot: None });
        }
        let nsub = self.nsub();
        let omega: Vec<f64> = (0..2 * nsub)
            .map(|j| {
                let d = if j < nsub { th[0] * self.lambda[j] + th[2] } else { th[1] * self.lambda[j - nsub] + th[3] };
                d.sqrt()
            })
            .collect();
        let m = 2 * nsub;
        let mut s = Mat::from_fn(m, m, |r, c| omega[r] * self.gram[(r, c)] * omega[c]);
        for r in 0..m {
            s[(r, r)] += th[4];
        }
        symmetrize(&mut s);
        Ok(Workspace { sigma2_e: th[4], omega, s_chol: Chol::new(s.as_ref())? })
    }

    /// `V⁻¹x`.
    fn vinv(&self, ws: &Workspace, x: &[f64]) -> Vec<f64> {
        let r: Vec<f64> = self.ut(x).iter().zip(&ws.omega).map(|(a, w)| a * w).collect();
        let z: Vec<f64> = ws.s_chol.solve_vec(&r).iter().zip(&ws.omega).map(|(a, w)| a * w).collect();
        let uz = self.u(&z);
        x.iter().zip(uz).map(|(a, b)| (a - b) / ws.sigma2_e).collect()
    }

    pub fn evaluate(&self, theta: &VarianceComponents, derivs: bool) -> Result<RemlEvaluation> {
        let n = self.y.len();
        let q = self.a.ncols();
        let nsub = self.nsub();
        let ws = self.workspace(theta)?;

        let a_cols: Vec<Vec<f64>> = (0..q).map(|l| (0..n).map(|r| self.a[(r, l)]).collect()).collect();
        let va: Vec<Vec<f64>> = a_cols.iter().map(|c| self.vinv(&ws, c)).collect();
        let vy = self.vinv(&ws, &self.y);
        let mut ca = Mat::from_fn(q, q, |i, j| dot(&a_cols[i], &va[j]));
        symmetrize(&mut ca);
        let chol_a = Chol::new(ca.as_ref())?;
        let aty: Vec<f64> = a_cols.iter().map(|c| dot(c, &vy)).collect();
        let beta = chol_a.solve_vec(&aty);
        let py: Vec<f64> = (0..n).map(|r| vy[r] - (0..q).map(|l| va[l][r] * beta[l]).sum::<f64>()).collect();

        let log_det_v = (n as f64 - 2.0 * nsub as f64) * ws.sigma2_e.ln() + ws.s_chol.log_det();
        let loglik = -0.5 * (dot(&self.y, &py) + log_det_v + chol_a.log_det());
        if !derivs {
            return Ok(RemlEvaluation { loglik, beta, derivs: None });
        }

        let m = 2 * nsub;
        let se = ws.sigma2_e;
        // diag(ŨᵀV⁻¹Ũ) = diag(C − CΩ S⁻¹ ΩC) / σ²_e with C = ŨᵀŨ
        let c_omega = Mat::from_fn(m, m, |r, c| self.gram[(r, c)] * ws.omega[c]);
        let x = ws.s_chol.solve(c_omega.transpose());
        let s_inv = ws.s_chol.inverse();
        // F = ŨᵀV⁻¹A and the fixed-effect correction diag(F C_A⁻¹ Fᵀ)
        let f_mat: Vec<Vec<f64>> = va.iter().map(|c| self.ut(c)).collect();
        let ca_inv = chol_a.inverse();
        let mut d_pu = vec![0.0; m];
        for j in 0..m {
            let k: f64 = (0..m).map(|c| c_omega[(j, c)] * x[(c, j)]).sum();
            let mut corr = 0.0;
            for l1 in 0..q {
                for l2 in 0..q {
                    corr += f_mat[l1][j] * ca_inv[(l1, l2)] * f_mat[l2][j];
                }
            }
            d_pu[j] = (self.gram[(j, j)] - k) / se - corr;
        }
        let tr_s_inv: f64 = (0..m).map(|j| s_inv[(j, j)]).sum();
        let mut tr_corr = 0.0;
        for l1 in 0..q {
            for l2 in 0..q {
                tr_corr += ca_inv[(l1, l2)] * dot(&va[l1], &va[l2]);
            }
        }
        let traces = [
            (0..nsub).map(|j| self.lambda[j] * d_pu[j]).sum::<f64>(),
            (0..nsub).map(|j| self.lambda[j] * d_pu[nsub + j]).sum::<f64>(),
            d_pu[..nsub].iter().sum::<f64>(),
            d_pu[nsub..].iter().sum::<f64>(),
            (n as f64 - m as f64 + se * tr_s_inv) / se - tr_corr,
        ];

        let r = self.ut(&py);
        let expand = |s: usize| -> Vec<f64> {
            let mut z = vec![0.0; m];
            for j in 0..nsub {
                match s {
                    0 => z[j] = self.lambda[j] * r[j],
                    1 => z[nsub + j] = self.lambda[j] * r[nsub + j],
                    2 => z[j] = r[j],
                    _ => z[nsub + j] = r[nsub + j],
                }
            }
            self.u(&z)
        };
        let f: Vec<Vec<f64>> = (0..5).map(|s| if s == 4 { py.clone() } else { expand(s) }).collect();
        let pf: Vec<Vec<f64>> = f
            .iter()
            .map(|fs| {
                let mut v = self.vinv(&ws, fs);
                let w: Vec<f64> = va.iter().map(|c| dot(c, fs)).collect();
                let coef = chol_a.solve_vec(&w);
                for (l, cl) in coef.iter().enumerate() {
                    v.iter_mut().zip(&va[l]).for_each(|(vi, al)| *vi -= cl * al);
                }
                v
            })
            .collect();
        let mut gradient = [0.0; 5];
        let mut ai = [[0.0; 5]; 5];
        for s in 0..5 {
            gradient[s] = -0.5 * (traces[s] - dot(&py, &f[s]));
            for k in s..5 {
                let v = -0.5 * dot(&f[s], &pf[k]);
                ai[s][k] = v;
                ai[k][s] = v;
            }
        }
        Ok(RemlEvaluation { loglik, beta, derivs: Some(Derivatives { gradient, ai }) })
    }
}
