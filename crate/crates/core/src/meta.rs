//! Partitioned fitting and meta-analysis of partition estimates that pile up on parameter bounds.
//!
//! Boundary estimates enter a censored Gaussian likelihood as point masses: for a variance
//! component `Σ_{x=0} ln(1 − Φ(μ/σ)) + Σ_{x>0} {−ln σ + ln φ((x − μ)/σ)}`, and for a ratio in
//! `[0, 1]` the same with an extra `ln Φ((μ − 1)/σ)` term for estimates at one. The continuous
//! part is not renormalised, so this is a censored rather than truncated model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aireml::FitResult;
use crate::error::{Error, Result};
use crate::model::COMPONENT_NAMES;
use crate::stats::{norm_hazard, norm_hazard_deriv, norm_ln_pdf, norm_ln_sf};

/// Variance estimates at or below this multiple of the fit's floor count as zeros.
pub const DEFAULT_FLOOR_MULTIPLE: f64 = 2.0;
/// Ratio estimates within this distance of 0 or 1 count as boundary observations.
pub const DEFAULT_LAMBDA_TOL: f64 = 0.01;
/// Slack added to boundary comparisons so rounded inputs such as `0.99` register at `1 − 0.01`.
const BOUNDARY_SLACK: f64 = 1e-12;
const SCORE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub m: usize,
    pub seed: u64,
    /// Group of each subject, in input order.
    pub assignments: Vec<usize>,
}

impl PartitionPlan {
    /// Subject indices of each group, ascending.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut g = vec![Vec::new(); self.m];
        for (i, &a) in self.assignments.iter().enumerate() {
            g[a].push(i);
        }
        g
    }
}

/// Balanced random assignment: shuffle, then deal round-robin.
pub fn partition_subjects(n_subjects: usize, m: usize, seed: u64) -> Result<PartitionPlan> {
    if m == 0 || m > n_subjects {
        return Err(Error::invalid(format!("cannot split {n_subjects} subjects into {m} groups")));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignments = vec![0; n_subjects];
    for (pos, &i) in order.iter().enumerate() {
        assignments[i] = pos % m;
    }
    Ok(PartitionPlan { m, seed, assignments })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Non-negative parameter; censored at zero.
    LeftAtZero,
    /// Parameter in `[0, 1]`; censored at both ends.
    UnitInterval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Censoring {
    Interior,
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionEstimates {
    pub label: String,
    pub regime: Regime,
    pub values: Vec<f64>,
    pub ses: Vec<f64>,
    pub censoring: Vec<Censoring>,
}

impl PartitionEstimates {
    pub fn new(
        label: impl Into<String>,
        regime: Regime,
        values: Vec<f64>,
        ses: Vec<f64>,
        censoring: Vec<Censoring>,
    ) -> Result<Self> {
        let label = label.into();
        if values.is_empty() || values.len() != ses.len() || values.len() != censoring.len() {
            return Err(Error::invalid(format!("{label}: need matching, non-empty estimate and SE lists")));
        }
        if ses.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::invalid(format!("{label}: partition SEs must be positive and finite")));
        }
        let (lo, hi) = match regime {
            Regime::LeftAtZero => (0.0, f64::INFINITY),
            Regime::UnitInterval => (0.0, 1.0),
        };
        if values.iter().any(|x| !(x.is_finite() && *x >= lo - BOUNDARY_SLACK && *x <= hi + BOUNDARY_SLACK)) {
            return Err(Error::invalid(format!("{label}: estimates outside [{lo}, {hi}]")));
        }
        if regime == Regime::LeftAtZero && censoring.contains(&Censoring::Upper) {
            return Err(Error::invalid(format!("{label}: upper censoring in a one-sided regime")));
        }
        Ok(PartitionEstimates { label, regime, values, ses, censoring })
    }

    /// Classifies each value: `≤ zero_threshold` is a lower-bound observation; in the unit
    /// regime `≥ 1 − upper_tol` is an upper-bound one.
    pub fn classify(
        label: impl Into<String>,
        regime: Regime,
        values: Vec<f64>,
        ses: Vec<f64>,
        zero_threshold: &[f64],
        upper_tol: f64,
    ) -> Result<Self> {
        if zero_threshold.len() != values.len() {
            return Err(Error::invalid("one zero threshold per partition is required"));
        }
        let censoring = values
            .iter()
            .zip(zero_threshold)
            .map(|(&x, &z)| {
                if x <= z + BOUNDARY_SLACK {
                    Censoring::Lower
                } else if regime == Regime::UnitInterval && x >= 1.0 - upper_tol - BOUNDARY_SLACK {
                    Censoring::Upper
                } else {
                    Censoring::Interior
                }
            })
            .collect();
        PartitionEstimates::new(label, regime, values, ses, censoring)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_censored(&self) -> usize {
        self.censoring.iter().filter(|c| **c != Censoring::Interior).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    LeftTrunc,
    DoubleTrunc,
    SimpleAvg,
    FixedEffect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Combined {
    pub method: Method,
    /// Estimate clamped to the regime's feasible region.
    pub combined: f64,
    /// Maximiser before clamping; absent when the likelihood is unbounded.
    pub unclamped: Option<f64>,
    pub se: Option<f64>,
    /// Likelihood increases without bound toward a parameter bound; `combined` is that bound.
    pub unbounded: bool,
}

fn ivw(x: &[f64], s: &[f64]) -> (f64, f64) {
    let w: Vec<f64> = s.iter().map(|v| 1.0 / (v * v)).collect();
    let sw: f64 = w.iter().sum();
    let mu = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
    (mu, sw.powf(-0.5))
}

pub fn fixed_effect_meta(est: &PartitionEstimates) -> Combined {
    let (mu, se) = ivw(&est.values, &est.ses);
    Combined { method: Method::FixedEffect, combined: mu, unclamped: Some(mu), se: Some(se), unbounded: false }
}

pub fn simple_average(est: &PartitionEstimates) -> Combined {
    let mean = crate::stats::mean(&est.values).expect("non-empty");
    Combined {
        method: Method::SimpleAvg,
        combined: mean,
        unclamped: Some(mean),
        se: crate::stats::sd(&est.values).map(|s| s / (est.len() as f64).sqrt()),
        unbounded: false,
    }
}

/// Censored log-likelihood and its first two derivatives in `μ`.
pub fn censored_loglik(est: &PartitionEstimates, mu: f64) -> (f64, f64, f64) {
    let (mut l, mut d1, mut d2) = (0.0, 0.0, 0.0);
    for ((&x, &s), c) in est.values.iter().zip(&est.ses).zip(&est.censoring) {
        match c {
            Censoring::Lower => {
                let z = mu / s;
                l += norm_ln_sf(z);
                d1 -= norm_hazard(z) / s;
                d2 -= norm_hazard_deriv(z) / (s * s);
            }
            Censoring::Upper => {
                let z = (1.0 - mu) / s;
                l += norm_ln_sf(z);
                d1 += norm_hazard(z) / s;
                d2 -= norm_hazard_deriv(z) / (s * s);
            }
            Censoring::Interior => {
                let z = (x - mu) / s;
                l += -s.ln() + norm_ln_pdf(z);
                d1 += z / s;
                d2 -= 1.0 / (s * s);
            }
        }
    }
    (l, d1, d2)
}

fn censored_mle(est: &PartitionEstimates, method: Method) -> Result<Combined> {
    let (lo_bound, hi_bound) = match est.regime {
        Regime::LeftAtZero => (0.0, f64::INFINITY),
        Regime::UnitInterval => (0.0, 1.0),
    };
    let clamp = |m: f64| m.clamp(lo_bound, hi_bound);
    if est.n_censored() == 0 {
        let (mu, se) = ivw(&est.values, &est.ses);
        return Ok(Combined { method, combined: clamp(mu), unclamped: Some(mu), se: Some(se), unbounded: false });
    }
    let score = |m: f64| censored_loglik(est, m).1;
    let smax = est.ses.iter().copied().fold(0.0, f64::max);
    let start = crate::stats::mean(&est.values).expect("non-empty");

    // bracket the root of the (decreasing) score
    let mut lo = start - smax;
    let mut hi = start + smax;
    let mut step = smax;
    let mut tries = 0;
    while score(lo) <= 0.0 || score(hi) >= 0.0 {
        tries += 1;
        if tries > 200 {
            // monotone likelihood: the supremum sits at the bound the score points to
            let toward_low = score(start) < 0.0;
            let bound = if toward_low { lo_bound } else { hi_bound };
            if !bound.is_finite() {
                return Err(Error::Numerical(format!("{}: censored likelihood has no maximiser", est.label)));
            }
            let d2 = censored_loglik(est, bound).2;
            return Ok(Combined {
                method,
                combined: bound,
                unclamped: None,
                se: (d2 < 0.0).then(|| (-d2).powf(-0.5)),
                unbounded: true,
            });
        }
        step *= 2.0;
        if score(lo) <= 0.0 {
            lo -= step;
        }
        if score(hi) >= 0.0 {
            hi += step;
        }
    }

    let mut mu = 0.5 * (lo + hi);
    for _ in 0..500 {
        let (_, d1, d2) = censored_loglik(est, mu);
        if d1.abs() <= SCORE_TOL {
            break;
        }
        if d1 > 0.0 {
            lo = mu;
        } else {
            hi = mu;
        }
        let newton = mu - d1 / d2;
        mu = if d2 < 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= f64::EPSILON * mu.abs().max(1.0) {
            break;
        }
    }
    let (_, d1, d2) = censored_loglik(est, mu);
    if !(d2 < 0.0) {
        return Err(Error::Numerical(format!("{}: censored likelihood is not concave at its maximiser", est.label)));
    }
    if d1.abs() > 1e-6 * (1.0 / (smax * smax)).max(1.0) {
        return Err(Error::Numerical(format!("{}: censored MLE did not converge (score {d1:e})", est.label)));
    }
    Ok(Combined { method, combined: clamp(mu), unclamped: Some(mu), se: Some((-d2).powf(-0.5)), unbounded: false })
}

pub fn left_truncated_mle(est: &PartitionEstimates) -> Result<Combined> {
    if est.regime != Regime::LeftAtZero {
        return Err(Error::invalid(format!("{}: left-censored combiner needs a one-sided regime", est.label)));
    }
    censored_mle(est, Method::LeftTrunc)
}

pub fn doubly_truncated_mle(est: &PartitionEstimates) -> Result<Combined> {
    if est.regime != Regime::UnitInterval {
        return Err(Error::invalid(format!("{}: doubly-censored combiner needs a unit-interval regime", est.label)));
    }
    censored_mle(est, Method::DoubleTrunc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedParameter {
    pub name: String,
    pub inputs: PartitionEstimates,
    /// The censoring-aware combination.
    pub primary: Combined,
    pub simple_average: Combined,
    pub fixed_effect: Combined,
}

pub fn combine_estimates(est: PartitionEstimates) -> Result<CombinedParameter> {
    let primary = match est.regime {
        Regime::LeftAtZero => left_truncated_mle(&est)?,
        Regime::UnitInterval => doubly_truncated_mle(&est)?,
    };
    Ok(CombinedParameter {
        name: est.label.clone(),
        simple_average: simple_average(&est),
        fixed_effect: fixed_effect_meta(&est),
        primary,
        inputs: est,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaOptions {
    pub floor_multiple: f64,
    pub lambda_tol: f64,
}

impl Default for MetaOptions {
    fn default() -> Self {
        MetaOptions { floor_multiple: DEFAULT_FLOOR_MULTIPLE, lambda_tol: DEFAULT_LAMBDA_TOL }
    }
}

/// Combines each variance component (left-censored) and `λ₁`, `λ₂` (censored at 0 and 1).
pub fn combine_fits(fits: &[FitResult], options: &MetaOptions) -> Result<Vec<CombinedParameter>> {
    if fits.is_empty() {
        return Err(Error::invalid("no partition fits to combine"));
    }
    let mut out = Vec::with_capacity(7);
    for s in 0..5 {
        let mut values = Vec::new();
        let mut ses = Vec::new();
        let mut zero = Vec::new();
        for (m, f) in fits.iter().enumerate() {
            let se = f.se_theta.ok_or_else(|| {
                Error::Numerical(format!("partition {m}: no standard errors for {}", COMPONENT_NAMES[s]))
            })?;
            values.push(f.theta_hat.to_array()[s]);
            ses.push(se[s]);
            zero.push(options.floor_multiple * f.floor);
        }
        out.push(combine_estimates(PartitionEstimates::classify(
            COMPONENT_NAMES[s],
            Regime::LeftAtZero,
            values,
            ses,
            &zero,
            0.0,
        )?)?);
    }
    for (l, name) in ["lambda1", "lambda2"].into_iter().enumerate() {
        let mut values = Vec::new();
        let mut ses = Vec::new();
        for (m, f) in fits.iter().enumerate() {
            let lam = [f.xi_hat.lambda1, f.xi_hat.lambda2][l]
                .ok_or_else(|| Error::Numerical(format!("partition {m}: {name} undefined")))?;
            let se = f.se_xi.ok_or_else(|| Error::Numerical(format!("partition {m}: no standard error for {name}")))?;
            values.push(lam);
            ses.push(se[l]);
        }
        let zero = vec![options.lambda_tol; fits.len()];
        out.push(combine_estimates(PartitionEstimates::classify(
            name,
            Regime::UnitInterval,
            values,
            ses,
            &zero,
            options.lambda_tol,
        )?)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn est(regime: Regime, values: &[f64], ses: &[f64], tol: f64) -> PartitionEstimates {
        let zero = vec![if regime == Regime::UnitInterval { tol } else { 0.0 }; values.len()];
        PartitionEstimates::classify("p", regime, values.to_vec(), ses.to_vec(), &zero, tol).unwrap()
    }

    fn grid_argmax(e: &PartitionEstimates) -> f64 {
        let smax = e.ses.iter().copied().fold(0.0, f64::max);
        let (lo, hi) = (-10.0 * smax, 10.0 * smax);
        let steps = ((hi - lo) / 1e-4) as usize;
        (0..=steps)
            .map(|k| lo + k as f64 * 1e-4)
            .max_by(|a, b| censored_loglik(e, *a).0.total_cmp(&censored_loglik(e, *b).0))
            .unwrap()
    }

    #[test]
    fn partition_balance_and_determinism() {
        let p = partition_subjects(10, 3, 7).unwrap();
        let mut sizes: Vec<usize> = p.groups().iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![3, 3, 4]);
        assert_eq!(p, partition_subjects(10, 3, 7).unwrap());
        assert_eq!(partition_subjects(5, 1, 0).unwrap().groups(), vec![vec![0, 1, 2, 3, 4]]);
        assert!(partition_subjects(3, 4, 0).is_err());
        assert!(partition_subjects(3, 0, 0).is_err());
    }

    #[test]
    fn reduction_law() {
        let x = [0.3, 0.5, 0.45, 0.8];
        let s = [0.1, 0.2, 0.15, 0.3];
        let l = left_truncated_mle(&est(Regime::LeftAtZero, &x, &s, 0.0)).unwrap();
        let d = doubly_truncated_mle(&est(Regime::UnitInterval, &x, &s, 0.01)).unwrap();
        let f = fixed_effect_meta(&est(Regime::LeftAtZero, &x, &s, 0.0));
        assert!((l.combined - f.combined).abs() <= 1e-8 && (d.combined - f.combined).abs() <= 1e-8);
        let (w, sw): (Vec<f64>, f64) =
            (s.iter().map(|v| 1.0 / (v * v)).collect(), s.iter().map(|v| 1.0 / (v * v)).sum());
        let expect = x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / sw;
        assert!((l.combined - expect).abs() < 1e-15);
    }

    #[test]
    fn single_zero_is_unbounded() {
        let c = left_truncated_mle(&est(Regime::LeftAtZero, &[0.0], &[1.0], 0.0)).unwrap();
        assert!(c.unbounded);
        assert_eq!(c.combined, 0.0);
        let h0 = norm_hazard(0.0);
        assert!((c.se.unwrap() - (h0 * h0).powf(-0.5)).abs() < 1e-12);
        let c = doubly_truncated_mle(&est(Regime::UnitInterval, &[1.0, 1.0], &[0.3, 0.4], 0.01)).unwrap();
        assert!(c.unbounded);
        assert_eq!(c.combined, 1.0);
    }

    #[test]
    fn symmetric_bounds_give_midpoint() {
        let c = doubly_truncated_mle(&est(Regime::UnitInterval, &[0.0, 1.0], &[0.4, 0.4], 0.01)).unwrap();
        assert!((c.combined - 0.5).abs() < 1e-10);
    }

    #[test]
    fn censored_mle_matches_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let m = rng.random_range(2..7);
            let x: Vec<f64> =
                (0..m).map(|_| if rng.random_bool(0.4) { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
            let s: Vec<f64> = (0..m).map(|_| rng.random_range(0.1..0.5)).collect();
            let e = est(Regime::LeftAtZero, &x, &s, 0.0);
            let c = left_truncated_mle(&e).unwrap();
            if c.unbounded {
                continue;
            }
            assert!((c.unclamped.unwrap() - grid_argmax(&e)).abs() <= 1e-3);
            assert!(censored_loglik(&e, c.unclamped.unwrap()).1.abs() <= 1e-10);

            let xu: Vec<f64> = x.iter().map(|v| if rng.random_bool(0.3) { 1.0 } else { *v }).collect();
            let e = est(Regime::UnitInterval, &xu, &s, 0.01);
            let c = doubly_truncated_mle(&e).unwrap();
            if !c.unbounded {
                assert!((c.unclamped.unwrap() - grid_argmax(&e)).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn monotone_in_added_observation() {
        let base = [0.0, 0.2, 0.0, 0.5];
        let s = [0.3, 0.3, 0.3, 0.3, 0.3];
        let mu0 = left_truncated_mle(&est(Regime::LeftAtZero, &base, &s[..4], 0.0)).unwrap().unclamped.unwrap();
        let with = [0.0, 0.2, 0.0, 0.5, mu0 + 0.3];
        let mu1 = left_truncated_mle(&est(Regime::LeftAtZero, &with, &s, 0.0)).unwrap().unclamped.unwrap();
        assert!(mu1 > mu0);
    }

    #[test]
    fn translation_equivariance() {
        let x = [1.0, 1.5, 2.5];
        let s = [0.2, 0.4, 0.3];
        let a = left_truncated_mle(&est(Regime::LeftAtZero, &x, &s, 0.0)).unwrap().combined;
        let shifted: Vec<f64> = x.iter().map(|v| v + 0.75).collect();
        let b = left_truncated_mle(&est(Regime::LeftAtZero, &shifted, &s, 0.0)).unwrap().combined;
        assert!((b - a - 0.75).abs() < 1e-12);
    }

    #[test]
    fn baselines() {
        let e = est(Regime::LeftAtZero, &[0.4, 0.4, 0.4], &[0.1, 0.2, 0.3], 0.0);
        let sa = simple_average(&e);
        assert!((sa.combined - 0.4).abs() < 1e-15 && sa.se == Some(0.0));
        let e = est(Regime::LeftAtZero, &[0.32, 0.27, 0.44, 0.41, 0.14], &[0.16; 5], 0.0);
        assert!((simple_average(&e).combined - 0.316).abs() < 1e-12);
        assert!((simple_average(&e).combined - fixed_effect_meta(&e).combined).abs() < 1e-12);
        let one = est(Regime::LeftAtZero, &[0.7], &[0.2], 0.0);
        assert_eq!(fixed_effect_meta(&one).combined, 0.7);
        assert_eq!(simple_average(&one).se, None);
        let two = est(Regime::LeftAtZero, &[0.2, 0.6], &[0.4, 0.4], 0.0);
        let fe = fixed_effect_meta(&two);
        assert!((fe.combined - 0.4).abs() < 1e-15 && (fe.se.unwrap() - 0.4 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(PartitionEstimates::classify("p", Regime::LeftAtZero, vec![0.1], vec![0.0], &[0.0], 0.0).is_err());
        assert!(PartitionEstimates::classify("p", Regime::UnitInterval, vec![1.2], vec![0.1], &[0.01], 0.01).is_err());
        assert!(PartitionEstimates::classify("p", Regime::LeftAtZero, vec![], vec![], &[], 0.0).is_err());
    }
}
