//! Restricted maximum likelihood for the longitudinal model, fitted by average-information
//! Newton steps with boundary resets, step halving and Levenberg damping.
//!
//! The REML log-likelihood drops its additive constant: `ℓ = -½(yᵀPy + ln|V| + ln|AᵀV⁻¹A|)`.

mod dense;
mod lowrank;

pub use dense::DenseEngine;
pub use lowrank::{LowRankEngine, NEGATIVE_EIGEN_TOL};

use faer::Mat;
use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grm::Grm;
use crate::linalg::{spd_condition, Chol};
use crate::model::{design_matrix, CovarianceStructure, HeritabilityPair, LongitudinalDataset, VarianceComponents};

pub type Matrix5 = [[f64; 5]; 5];

/// Steps whose system has condition number above this are damped.
pub const MAX_CONDITION: f64 = 1e12;
const DAMPING_START: f64 = 1e-4;
const DAMPING_GROWTH: f64 = 10.0;
const DAMPING_TRIES: usize = 16;
const MAX_HALVINGS: usize = 10;
/// Consecutive resets after which a component stays at the floor.
const FREEZE_AFTER: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitRule {
    /// Each component starts at `σ²_ph / 4`, slope components further divided by `var(t)`.
    ScaledSplit,
    Fixed(VarianceComponents),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EngineChoice {
    /// Subject-space engine unless the GRM is materially indefinite.
    Auto,
    Dense,
    LowRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemlOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub boundary_floor_scale: f64,
    pub init: InitRule,
    pub engine: EngineChoice,
    /// Dense-engine fits are refused above this many records.
    pub record_cap: usize,
}

impl Default for RemlOptions {
    fn default() -> Self {
        RemlOptions {
            max_iter: 200,
            tol: 1e-4,
            boundary_floor_scale: 1e-6,
            init: InitRule::ScaledSplit,
            engine: EngineChoice::Auto,
            record_cap: crate::model::DEFAULT_RECORD_CAP,
        }
    }
}

impl RemlOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.boundary_floor_scale > 0.0) {
            return Err(Error::invalid("REML options need tol > 0, max_iter >= 1 and a positive floor scale"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Derivatives {
    pub gradient: [f64; 5],
    pub ai: Matrix5,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemlEvaluation {
    pub loglik: f64,
    pub beta: Vec<f64>,
    pub derivs: Option<Derivatives>,
}

pub enum Engine<'s, 'g> {
    Dense(DenseEngine<'s, 'g>),
    LowRank(LowRankEngine),
}

impl<'s, 'g> Engine<'s, 'g> {
    pub fn build(
        choice: EngineChoice,
        structure: &'s CovarianceStructure<'g>,
        y: &[f64],
        a: &Mat<f64>,
        record_cap: usize,
    ) -> Result<Self> {
        let dense = || -> Result<Self> {
            if y.len() > record_cap {
                return Err(Error::invalid(format!(
                    "{} records exceed the dense cap of {record_cap}; partition the data",
                    y.len()
                )));
            }
            Ok(Engine::Dense(DenseEngine::new(structure, y, a)))
        };
        match choice {
            EngineChoice::Dense => dense(),
            EngineChoice::LowRank => LowRankEngine::new(structure, y, a)?
                .map(Engine::LowRank)
                .ok_or_else(|| Error::Numerical("GRM is materially indefinite".into())),
            EngineChoice::Auto => match LowRankEngine::new(structure, y, a)? {
                Some(e) => Ok(Engine::LowRank(e)),
                None => {
                    warn!("GRM has materially negative eigenvalues; falling back to the dense engine");
                    dense()
                }
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Engine::Dense(_) => "dense",
            Engine::LowRank(_) => "lowrank",
        }
    }

    pub fn evaluate(&self, theta: &VarianceComponents, derivs: bool) -> Result<RemlEvaluation> {
        let out = match self {
            Engine::Dense(e) => e.evaluate(theta, derivs),
            Engine::LowRank(e) => e.evaluate(theta, derivs),
        }?;
        if !out.loglik.is_finite() {
            return Err(Error::Numerical(format!("non-finite REML log-likelihood at {theta:?}")));
        }
        Ok(out)
    }
}

/// `ℓ_REML(θ)` by the dense reference engine.
pub fn reml_loglik(
    theta: &VarianceComponents,
    y: &[f64],
    a: &Mat<f64>,
    structure: &CovarianceStructure<'_>,
) -> Result<f64> {
    Ok(DenseEngine::new(structure, y, a).evaluate(theta, false)?.loglik)
}

/// `∂ℓ/∂θ_s = -½{tr(P H_s) - yᵀP H_s P y}`.
pub fn reml_gradient(
    theta: &VarianceComponents,
    y: &[f64],
    a: &Mat<f64>,
    structure: &CovarianceStructure<'_>,
) -> Result<[f64; 5]> {
    let e = DenseEngine::new(structure, y, a).evaluate(theta, true)?;
    Ok(e.derivs.expect("requested").gradient)
}

/// `AI_sk = -½ yᵀP H_s P H_k P y`.
pub fn average_information(
    theta: &VarianceComponents,
    y: &[f64],
    a: &Mat<f64>,
    structure: &CovarianceStructure<'_>,
) -> Result<Matrix5> {
    let e = DenseEngine::new(structure, y, a).evaluate(theta, true)?;
    Ok(e.derivs.expect("requested").ai)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta_hat: VarianceComponents,
    pub beta_hat: Vec<f64>,
    pub ai_theta: Matrix5,
    pub xi_hat: HeritabilityPair,
    /// Covariance of `ξ̂`; absent when `-KᵀAI K` is not invertible or a ratio is undefined.
    pub cov_xi: Option<Matrix5>,
    pub se_theta: Option<[f64; 5]>,
    pub se_xi: Option<[f64; 5]>,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Component sits at the floor `σ²_ph · boundary_floor_scale`.
    pub boundary_flags: [bool; 5],
    pub frozen: [bool; 5],
    /// Iterations (1-based) on which some component was reset to the floor.
    pub reset_iterations: Vec<usize>,
    pub damped_iterations: Vec<usize>,
    /// Iterations where ten halvings did not restore an increase in ℓ.
    pub stalled_iterations: Vec<usize>,
    /// λ̂₁, λ̂₂ sit on the boundary because one of their components is at the floor.
    pub lambda_boundary: [bool; 2],
    pub floor: f64,
    pub engine: String,
}

impl FitResult {
    pub fn lambda_se(&self) -> [Option<f64>; 2] {
        match self.se_xi {
            Some(se) => [Some(se[0]), Some(se[1])],
            None => [None, None],
        }
    }
}

/// Jacobian `∂θ/∂ξ`, rows indexed by θ and columns by ξ.
pub fn jacobian(xi: &[f64; 5]) -> Matrix5 {
    [
        [xi[2], 0.0, xi[0], 0.0, 0.0],
        [0.0, xi[3], 0.0, xi[1], 0.0],
        [-xi[2], 0.0, 1.0 - xi[0], 0.0, 0.0],
        [0.0, -xi[3], 0.0, 1.0 - xi[1], 0.0],
        [0.0, 0.0, 0.0, 0.0, 1.0],
    ]
}

fn mat5(m: &Matrix5) -> Mat<f64> {
    Mat::from_fn(5, 5, |i, j| m[i][j])
}

fn arr5(m: &Mat<f64>) -> Matrix5 {
    std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
}

/// `(-AI)⁻¹`, when `-AI` is positive definite.
pub fn information_inverse(ai: &Matrix5) -> Option<Matrix5> {
    let neg = mat5(ai) * faer::Scale(-1.0);
    Chol::new(neg.as_ref()).ok().map(|c| arr5(&c.inverse()))
}

/// `ξ̂` and `cov(ξ̂) = (-KᵀAI K)⁻¹`.
pub fn delta_transform(theta: &VarianceComponents, ai: &Matrix5) -> (HeritabilityPair, Option<Matrix5>) {
    let h = HeritabilityPair::from_theta(theta);
    let Some(xi) = h.xi() else {
        return (h, None);
    };
    let k = mat5(&jacobian(&xi));
    let ai_xi = k.transpose() * mat5(ai) * &k * faer::Scale(-1.0);
    let cov = Chol::new(ai_xi.as_ref()).ok().map(|c| arr5(&c.inverse()));
    (h, cov)
}

fn diag_sqrt(m: &Matrix5) -> Option<[f64; 5]> {
    let d: [f64; 5] = std::array::from_fn(|i| m[i][i]);
    d.iter().all(|v| *v >= 0.0 && v.is_finite()).then(|| d.map(f64::sqrt))
}

pub fn initial_theta(data: &LongitudinalDataset, options: &RemlOptions) -> VarianceComponents {
    match options.init {
        InitRule::Fixed(t) => t,
        InitRule::ScaledSplit => {
            let q = 0.25 * data.phenotype_variance();
            let vt = crate::stats::variance(&data.times()).filter(|v| *v > 0.0).unwrap_or(1.0);
            VarianceComponents::new(q, q / vt, q, q / vt, q)
        }
    }
}

/// Newton direction `(-AI_ff)⁻¹ DL_f` over the free components, damped when ill-conditioned.
fn newton_step(d: &Derivatives, free: &[usize]) -> Result<(Vec<f64>, bool)> {
    let m = free.len();
    let neg = Mat::from_fn(m, m, |i, j| -d.ai[free[i]][free[j]]);
    let rhs: Vec<f64> = free.iter().map(|&s| d.gradient[s]).collect();
    if spd_condition(neg.as_ref()) <= MAX_CONDITION {
        if let Ok(c) = Chol::new(neg.as_ref()) {
            return Ok((c.solve_vec(&rhs), false));
        }
    }
    let max_diag = (0..m).map(|i| neg[(i, i)].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut mu = DAMPING_START;
    for _ in 0..DAMPING_TRIES {
        let mut damped = neg.clone();
        for i in 0..m {
            damped[(i, i)] += mu * neg[(i, i)].abs().max(1e-12 * max_diag);
        }
        if spd_condition(damped.as_ref()) <= MAX_CONDITION {
            if let Ok(c) = Chol::new(damped.as_ref()) {
                return Ok((c.solve_vec(&rhs), true));
            }
        }
        mu *= DAMPING_GROWTH;
    }
    Err(Error::Numerical("average-information matrix could not be regularised".into()))
}

/// AI-REML fit of `θ` for `data` paired with `grm` (same subjects, same order).
pub fn ai_reml_fit(data: &LongitudinalDataset, grm: &Grm, options: &RemlOptions) -> Result<FitResult> {
    options.validate()?;
    let n = data.total_records();
    if n < 6 {
        return Err(Error::invalid(format!("{n} records cannot identify five variance components")));
    }
    let a = design_matrix(data)?;
    let y = data.phenotypes();
    let sigma2_ph = data.phenotype_variance();
    if !(sigma2_ph > 0.0) {
        return Err(Error::invalid("phenotype has zero variance"));
    }
    let floor = sigma2_ph * options.boundary_floor_scale;
    let structure = CovarianceStructure::assemble(data, grm)?;
    let engine = Engine::build(options.engine, &structure, &y, &a, options.record_cap)?;

    let mut theta = initial_theta(data, options).to_array().map(|v| v.max(floor));
    let mut eval = engine.evaluate(&VarianceComponents::from_array(theta), true)?;
    let mut trace = vec![eval.loglik];
    let mut streak = [0usize; 5];
    let mut frozen = [false; 5];
    let mut reset_iterations = Vec::new();
    let mut damped_iterations = Vec::new();
    let mut stalled_iterations = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=options.max_iter {
        iterations = it;
        let free: Vec<usize> = (0..5).filter(|&s| !frozen[s]).collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        let derivs = eval.derivs.expect("evaluated with derivatives");
        let (step, damped) = newton_step(&derivs, &free)?;
        if damped {
            damped_iterations.push(it);
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for halving in 0..=MAX_HALVINGS {
            let mut cand = theta;
            let mut reset = [false; 5];
            for (k, &s) in free.iter().enumerate() {
                cand[s] = theta[s] + alpha * step[k];
                if !(cand[s] >= floor) {
                    cand[s] = floor;
                    reset[s] = true;
                }
            }
            let res = engine.evaluate(&VarianceComponents::from_array(cand), true);
            let ok = matches!(&res, Ok(e) if e.loglik >= eval.loglik);
            if ok || halving == MAX_HALVINGS {
                match res {
                    Ok(e) => {
                        if !ok {
                            stalled_iterations.push(it);
                        }
                        accepted = Some((cand, reset, e));
                    }
                    Err(err) if err.is_numerical() => {}
                    Err(err) => return Err(err),
                }
                break;
            }
            alpha *= 0.5;
        }
        let Some((cand, reset, e)) = accepted else {
            debug!("iteration {it}: no admissible step; stopping");
            stalled_iterations.push(it);
            break;
        };

        if reset.iter().any(|&r| r) {
            reset_iterations.push(it);
        }
        for s in 0..5 {
            streak[s] = if reset[s] { streak[s] + 1 } else { 0 };
            if streak[s] >= FREEZE_AFTER && !frozen[s] {
                debug!("component {s} frozen at the floor after {FREEZE_AFTER} resets");
                frozen[s] = true;
            }
        }
        let delta = e.loglik - eval.loglik;
        theta = cand;
        eval = e;
        trace.push(eval.loglik);
        debug!("iteration {it}: loglik {:.8} change {delta:.3e}", eval.loglik);
        if delta.abs() < options.tol {
            converged = true;
            break;
        }
    }

    let theta_hat = VarianceComponents::from_array(theta);
    let derivs = eval.derivs.expect("evaluated with derivatives");
    let (xi_hat, cov_xi) = delta_transform(&theta_hat, &derivs.ai);
    let boundary_flags = theta.map(|v| v <= floor * (1.0 + 1e-9));
    Ok(FitResult {
        theta_hat,
        beta_hat: eval.beta,
        ai_theta: derivs.ai,
        xi_hat,
        se_theta: information_inverse(&derivs.ai).as_ref().and_then(diag_sqrt),
        se_xi: cov_xi.as_ref().and_then(diag_sqrt),
        cov_xi,
        loglik_trace: trace,
        converged,
        iterations,
        boundary_flags,
        frozen,
        reset_iterations,
        damped_iterations,
        stalled_iterations,
        lambda_boundary: [boundary_flags[0] || boundary_flags[2], boundary_flags[1] || boundary_flags[3]],
        floor,
        engine: engine.name().to_string(),
    })
}
