//! Restricted Haseman-Elston estimation: the pairwise-product loss is an exact convex quadratic
//! in `θ`, accumulated from per-subject sufficient statistics and minimised over `θ ≥ 0`.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grm::Grm;
use crate::linalg::{col_mat, spd_condition, sym_eigen, Chol};
use crate::model::{
    check_aligned, check_full_rank, design_matrix, HeritabilityPair, LongitudinalDataset, VarianceComponents,
    COMPONENT_NAMES,
};
use crate::stats;

/// GRM eigenvalues are floored here before factorising for simulation.
pub const GRM_EIGEN_FLOOR: f64 = 1e-8;
pub const DEFAULT_BOOTSTRAP_REPLICATES: usize = 1000;
/// Reduced systems whose equilibrated condition number exceeds this are skipped.
const NNLS_MAX_CONDITION: f64 = 1e13;

/// Ordered record-pair counts behind the accumulated loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub diagonal: u64,
    pub within_subject: u64,
    pub between_subject: u64,
}

/// `F(θ) = ½θᵀDθ − cᵀθ + constant`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalEquations {
    pub d: [[f64; 5]; 5],
    pub c: [f64; 5],
    pub constant: f64,
    pub counts: PairCounts,
}

impl NormalEquations {
    pub fn loss(&self, theta: &[f64; 5]) -> f64 {
        let mut quad = 0.0;
        for s in 0..5 {
            for k in 0..5 {
                quad += theta[s] * self.d[s][k] * theta[k];
            }
        }
        0.5 * quad - crate::linalg::dot(&self.c, theta) + self.constant
    }

    /// `∇F = Dθ − c`.
    pub fn gradient(&self, theta: &[f64; 5]) -> [f64; 5] {
        std::array::from_fn(|s| (0..5).map(|k| self.d[s][k] * theta[k]).sum::<f64>() - self.c[s])
    }
}

/// OLS coefficients and residuals `y − Aβ̂`.
pub fn ols_fixed_effects(y: &[f64], a: &Mat<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.nrows() != y.len() {
        return Err(Error::Dimension(format!("{} rows in A for {} phenotypes", a.nrows(), y.len())));
    }
    check_full_rank(a)?;
    let ata = a.transpose() * a;
    let chol = Chol::new(ata.as_ref()).map_err(|_| Error::RankDeficient { column: a.ncols() - 1 })?;
    let resid_of = |beta: &[f64]| -> Vec<f64> {
        let fit = a * col_mat(beta);
        y.iter().enumerate().map(|(r, v)| v - fit[(r, 0)]).collect()
    };
    let aty = a.transpose() * col_mat(y);
    let mut beta = chol.solve_vec(&(0..a.ncols()).map(|l| aty[(l, 0)]).collect::<Vec<_>>());
    // one step of iterative refinement against the normal-equation residual
    let r = resid_of(&beta);
    let atr = a.transpose() * col_mat(&r);
    let corr = chol.solve_vec(&(0..a.ncols()).map(|l| atr[(l, 0)]).collect::<Vec<_>>());
    beta.iter_mut().zip(corr).for_each(|(b, c)| *b += c);
    let resid = resid_of(&beta);
    Ok((beta, resid))
}

/// Normal equations of the loss over all ordered record pairs, from per-subject sums.
/// `y` holds the stacked (already de-meaned) phenotypes of `data`.
pub fn accumulate_normal_equations(data: &LongitudinalDataset, grm: &Grm, y: &[f64]) -> Result<NormalEquations> {
    check_aligned(data, grm)?;
    if y.len() != data.total_records() {
        return Err(Error::Dimension(format!("{} residuals for {} records", y.len(), data.total_records())));
    }
    let nsub = data.n_subjects();
    let (mut cnt, mut s1, mut s2) = (vec![0.0; nsub], vec![0.0; nsub], vec![0.0; nsub]);
    let (mut sy, mut syt, mut syy) = (vec![0.0; nsub], vec![0.0; nsub], vec![0.0; nsub]);
    let mut pos = 0;
    for (i, s) in data.subjects().iter().enumerate() {
        for &t in &s.times {
            let v = y[pos];
            cnt[i] += 1.0;
            s1[i] += t;
            s2[i] += t * t;
            sy[i] += v;
            syt[i] += v * t;
            syy[i] += v * v;
            pos += 1;
        }
    }

    // hh[s][k] = Σ_{ordered pairs} h_s h_k, ph[s] = Σ y_a y_b h_s
    let mut hh = [[0.0; 5]; 5];
    let mut ph = [0.0; 5];
    let g = grm.values();
    for k in 0..nsub {
        for i in 0..nsub {
            let gik = g[(i, k)];
            let g2 = gik * gik;
            hh[0][0] += g2 * cnt[i] * cnt[k];
            hh[0][1] += g2 * s1[i] * s1[k];
            hh[1][1] += g2 * s2[i] * s2[k];
            ph[0] += gik * sy[i] * sy[k];
            ph[1] += gik * syt[i] * syt[k];
        }
    }
    for i in 0..nsub {
        let gii = g[(i, i)];
        hh[0][2] += gii * cnt[i] * cnt[i];
        hh[0][3] += gii * s1[i] * s1[i];
        hh[0][4] += gii * cnt[i];
        hh[1][2] += gii * s1[i] * s1[i];
        hh[1][3] += gii * s2[i] * s2[i];
        hh[1][4] += gii * s2[i];
        hh[2][2] += cnt[i] * cnt[i];
        hh[2][3] += s1[i] * s1[i];
        hh[2][4] += cnt[i];
        hh[3][3] += s2[i] * s2[i];
        hh[3][4] += s2[i];
        hh[4][4] += cnt[i];
        ph[2] += sy[i] * sy[i];
        ph[3] += syt[i] * syt[i];
        ph[4] += syy[i];
    }
    let mut d = [[0.0; 5]; 5];
    for s in 0..5 {
        for k in s..5 {
            d[s][k] = 2.0 * hh[s][k];
            d[k][s] = d[s][k];
        }
    }
    let total_sq: f64 = syy.iter().sum();
    let n = data.total_records() as u64;
    let within: u64 = data.subjects().iter().map(|s| (s.n_records() as u64) * (s.n_records() as u64 - 1)).sum();
    Ok(NormalEquations {
        d,
        c: ph.map(|v| 2.0 * v),
        constant: total_sq * total_sq,
        counts: PairCounts { diagonal: n, within_subject: within, between_subject: n * n - n - within },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NnlsSolution {
    pub theta: [f64; 5],
    pub clamped: [bool; 5],
    pub loss: f64,
}

fn kkt_tolerance(eq: &NormalEquations) -> f64 {
    let scale = eq.d.iter().flatten().chain(eq.c.iter()).fold(1.0f64, |m, v| m.max(v.abs()));
    1e-10 * scale
}

/// Exact minimiser of `F` over `θ ≥ 0` by enumerating all 32 clamped sets.
pub fn solve_nnls(eq: &NormalEquations) -> Result<NnlsSolution> {
    let tol = kkt_tolerance(eq);
    let mut best: Option<NnlsSolution> = None;
    let mut feasible_fallback: Option<NnlsSolution> = None;
    for mask in 0u32..32 {
        let clamped: [bool; 5] = std::array::from_fn(|s| mask & (1 << s) != 0);
        let free: Vec<usize> = (0..5).filter(|&s| !clamped[s]).collect();
        let mut theta = [0.0; 5];
        if !free.is_empty() {
            let m = free.len();
            let diag: Vec<f64> = free.iter().map(|&s| eq.d[s][s]).collect();
            if diag.iter().any(|v| !(*v > 0.0)) {
                continue;
            }
            let sc: Vec<f64> = diag.iter().map(|v| 1.0 / v.sqrt()).collect();
            let dff = Mat::from_fn(m, m, |i, j| sc[i] * eq.d[free[i]][free[j]] * sc[j]);
            if spd_condition(dff.as_ref()) > NNLS_MAX_CONDITION {
                continue;
            }
            let Ok(chol) = Chol::new(dff.as_ref()) else { continue };
            let rhs: Vec<f64> = (0..m).map(|i| sc[i] * eq.c[free[i]]).collect();
            let x = chol.solve_vec(&rhs);
            for (i, &s) in free.iter().enumerate() {
                theta[s] = sc[i] * x[i];
            }
        }
        if free.iter().any(|&s| !(theta[s] >= 0.0)) {
            continue;
        }
        let cand = NnlsSolution { theta, clamped, loss: eq.loss(&theta) };
        let grad = eq.gradient(&theta);
        let kkt = (0..5).all(|s| !clamped[s] || grad[s] >= -tol);
        let slot = if kkt { &mut best } else { &mut feasible_fallback };
        if slot.as_ref().is_none_or(|b| better(&cand, b)) {
            *slot = Some(cand);
        }
    }
    best.or(feasible_fallback).ok_or_else(|| Error::Numerical("every reduced REHE system is singular".into()))
}

fn better(a: &NnlsSolution, b: &NnlsSolution) -> bool {
    let tie = 1e-12 * a.loss.abs().max(b.loss.abs()).max(1.0);
    if (a.loss - b.loss).abs() > tie {
        return a.loss < b.loss;
    }
    let (ca, cb) = (a.clamped.iter().filter(|&&c| c).count(), b.clamped.iter().filter(|&&c| c).count());
    if ca != cb {
        return ca < cb;
    }
    a.theta.iter().zip(&b.theta).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()) == Some(std::cmp::Ordering::Less)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReheFit {
    pub beta_hat: Vec<f64>,
    pub theta_hat: VarianceComponents,
    pub xi_hat: HeritabilityPair,
    /// Components held at zero by the constraint.
    pub clamped: [bool; 5],
    pub loss: f64,
    pub normal_equations: NormalEquations,
}

impl ReheFit {
    /// `(θ̂, λ̂₁, λ̂₂)` with undefined ratios as `None`.
    pub fn parameters(&self) -> [Option<f64>; 7] {
        let t = self.theta_hat.to_array();
        [Some(t[0]), Some(t[1]), Some(t[2]), Some(t[3]), Some(t[4]), self.xi_hat.lambda1, self.xi_hat.lambda2]
    }
}

pub const PARAMETER_NAMES: [&str; 7] = [
    COMPONENT_NAMES[0],
    COMPONENT_NAMES[1],
    COMPONENT_NAMES[2],
    COMPONENT_NAMES[3],
    COMPONENT_NAMES[4],
    "lambda1",
    "lambda2",
];

/// OLS residualisation, normal-equation accumulation and the constrained solve.
pub fn rehe_fit(data: &LongitudinalDataset, grm: &Grm) -> Result<ReheFit> {
    check_aligned(data, grm)?;
    let a = design_matrix(data)?;
    let (beta_hat, resid) = ols_fixed_effects(&data.phenotypes(), &a)?;
    let eq = accumulate_normal_equations(data, grm, &resid)?;
    let sol = solve_nnls(&eq)?;
    let theta_hat = VarianceComponents::from_array(sol.theta);
    Ok(ReheFit {
        beta_hat,
        theta_hat,
        xi_hat: HeritabilityPair::from_theta(&theta_hat),
        clamped: sol.clamped,
        loss: sol.loss,
        normal_equations: eq,
    })
}

/// `F` with `G = F Fᵀ` after flooring eigenvalues at `GRM_EIGEN_FLOOR`.
pub struct GrmFactor {
    factor: Mat<f64>,
}

impl GrmFactor {
    pub fn new(grm: &Grm) -> Result<Self> {
        let (vals, q) = sym_eigen(grm.values().as_ref())?;
        let n = vals.len();
        let roots: Vec<f64> = vals.iter().map(|v| v.max(GRM_EIGEN_FLOOR).sqrt()).collect();
        if roots.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("GRM factorisation produced non-finite values".into()));
        }
        Ok(GrmFactor { factor: Mat::from_fn(n, n, |i, j| q[(i, j)] * roots[j]) })
    }

    /// `F z` for a standard-normal `z` of length `N`.
    pub fn correlate(&self, z: &[f64]) -> Vec<f64> {
        let n = z.len();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let zj = z[j];
            for (i, o) in out.iter_mut().enumerate() {
                *o += self.factor[(i, j)] * zj;
            }
        }
        out
    }
}

fn normals(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Synthetic stacked phenotypes `Aβ + g + g*∘t + b₀ + b₁∘t + e` on the layout of `template`.
pub fn sample_from_model(
    beta: &[f64],
    theta: &VarianceComponents,
    template: &LongitudinalDataset,
    factor: &GrmFactor,
    seed: u64,
) -> Result<Vec<f64>> {
    theta.validate()?;
    let a = design_matrix(template)?;
    if beta.len() != a.ncols() {
        return Err(Error::Dimension(format!("{} coefficients for {} design columns", beta.len(), a.ncols())));
    }
    let nsub = template.n_subjects();
    if factor.factor.nrows() != nsub {
        return Err(Error::Dimension("GRM factor does not match the template".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = factor.correlate(&normals(&mut rng, nsub));
    let gs = factor.correlate(&normals(&mut rng, nsub));
    let b0 = normals(&mut rng, nsub);
    let b1 = normals(&mut rng, nsub);
    let e = normals(&mut rng, template.total_records());
    let sd = theta.to_array().map(f64::sqrt);
    let mut y = Vec::with_capacity(template.total_records());
    let mut r = 0;
    for (i, s) in template.subjects().iter().enumerate() {
        for &t in &s.times {
            let fixed: f64 = (0..a.ncols()).map(|l| a[(r, l)] * beta[l]).sum();
            y.push(fixed + sd[0] * g[i] + sd[1] * gs[i] * t + sd[2] * b0[i] + sd[3] * b1[i] * t + sd[4] * e[r]);
            r += 1;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CiMethod {
    #[default]
    Percentile,
    Normal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub estimate: Option<f64>,
    /// Replicates in which the parameter was defined.
    pub n_defined: usize,
    pub emp_se: Option<f64>,
    pub mad: Option<f64>,
    pub percentile_ci: Option<(f64, f64)>,
    pub normal_ci: Option<(f64, f64)>,
}

impl ParameterSummary {
    pub fn ci(&self, method: CiMethod) -> Option<(f64, f64)> {
        match method {
            CiMethod::Percentile => self.percentile_ci,
            CiMethod::Normal => self.normal_ci,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub replicates: usize,
    pub failures: usize,
    pub failure_fraction: f64,
    pub seed: u64,
    pub parameters: Vec<ParameterSummary>,
}

pub fn summarize_parameter(name: &str, estimate: Option<f64>, values: &[f64]) -> ParameterSummary {
    let emp_se = stats::sd(values);
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let percentile_ci = if values.len() >= 2 {
        stats::quantile_sorted(&sorted, 0.025).zip(stats::quantile_sorted(&sorted, 0.975))
    } else {
        None
    };
    let normal_ci = estimate.zip(emp_se).map(|(e, s)| (e - 1.959963984540054 * s, e + 1.959963984540054 * s));
    ParameterSummary {
        name: name.to_string(),
        estimate,
        n_defined: values.len(),
        emp_se,
        mad: stats::scaled_mad(values),
        percentile_ci,
        normal_ci,
    }
}

/// Parametric bootstrap of the REHE fit; replicate `r` uses seed `seed + r`.
pub fn parametric_bootstrap(
    fit: &ReheFit,
    data: &LongitudinalDataset,
    grm: &Grm,
    replicates: usize,
    seed: u64,
) -> Result<BootstrapSummary> {
    if replicates == 0 {
        return Err(Error::invalid("bootstrap needs at least one replicate"));
    }
    check_aligned(data, grm)?;
    let factor = GrmFactor::new(grm)?;
    let outcomes: Vec<Option<[Option<f64>; 7]>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let y =
                sample_from_model(&fit.beta_hat, &fit.theta_hat, data, &factor, seed.wrapping_add(r as u64)).ok()?;
            let rep = data.with_phenotypes(&y).ok()?;
            rehe_fit(&rep, grm).ok().map(|f| f.parameters())
        })
        .collect();
    let ok: Vec<[Option<f64>; 7]> = outcomes.iter().flatten().copied().collect();
    let failures = replicates - ok.len();
    let estimates = fit.parameters();
    let parameters = (0..7)
        .map(|p| {
            let vals: Vec<f64> = ok.iter().filter_map(|o| o[p]).collect();
            summarize_parameter(PARAMETER_NAMES[p], estimates[p], &vals)
        })
        .collect();
    Ok(BootstrapSummary {
        replicates,
        failures,
        failure_fraction: failures as f64 / replicates as f64,
        seed,
        parameters,
    })
}

#[cfg(test)]
mod tests;
