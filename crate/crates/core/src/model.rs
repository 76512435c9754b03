//! Longitudinal data, variance components and the five-matrix covariance structure
//! `V = Σ θ_s H_s` shared by both estimators.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grm::Grm;

/// Dense `H_s` matrices are only materialised up to this many records.
pub const DEFAULT_RECORD_CAP: usize = 20_000;

pub const COMPONENT_NAMES: [&str; 5] = ["sigma2_g", "sigma2_gstar", "sigma2_b0", "sigma2_b1", "sigma2_e"];

#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub times: Vec<f64>,
    pub phenotypes: Vec<f64>,
    /// Extra covariates per record (beyond time), `covariates[j][l]`.
    pub covariates: Vec<Vec<f64>>,
}

impl Subject {
    pub fn new(id: impl Into<String>, times: Vec<f64>, phenotypes: Vec<f64>) -> Self {
        let n = times.len();
        Subject { id: id.into(), times, phenotypes, covariates: vec![Vec::new(); n] }
    }

    pub fn n_records(&self) -> usize {
        self.times.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<Subject>,
    covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>, covariate_names: Vec<String>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &subjects {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::invalid(format!("duplicate subject {:?}", s.id)));
            }
            if s.times.is_empty() {
                return Err(Error::invalid(format!("subject {:?} has no records", s.id)));
            }
            if s.phenotypes.len() != s.times.len() || s.covariates.len() != s.times.len() {
                return Err(Error::Dimension(format!("subject {:?} has ragged record fields", s.id)));
            }
            if s.times.iter().chain(&s.phenotypes).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("subject {:?} has non-finite time or phenotype", s.id)));
            }
            for row in &s.covariates {
                if row.len() != covariate_names.len() {
                    return Err(Error::Dimension(format!(
                        "subject {:?} has {} covariates, expected {}",
                        s.id,
                        row.len(),
                        covariate_names.len()
                    )));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("subject {:?} has a non-finite covariate", s.id)));
                }
            }
        }
        Ok(LongitudinalDataset { subjects, covariate_names })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn total_records(&self) -> usize {
        self.subjects.iter().map(Subject::n_records).sum()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    /// Phenotypes stacked subject by subject.
    pub fn phenotypes(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.phenotypes.iter().copied()).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.subjects.iter().flat_map(|s| s.times.iter().copied()).collect()
    }

    /// Subject index of every stacked record.
    pub fn record_subjects(&self) -> Vec<usize> {
        self.subjects.iter().enumerate().flat_map(|(i, s)| std::iter::repeat_n(i, s.n_records())).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let subjects = indices
            .iter()
            .map(|&i| {
                self.subjects.get(i).cloned().ok_or_else(|| Error::invalid(format!("subject index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        LongitudinalDataset::new(subjects, self.covariate_names.clone())
    }

    /// Same layout with the stacked phenotype vector replaced.
    pub fn with_phenotypes(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.total_records() {
            return Err(Error::Dimension(format!("{} phenotypes for {} records", y.len(), self.total_records())));
        }
        let mut out = self.clone();
        let mut pos = 0;
        for s in &mut out.subjects {
            let n = s.n_records();
            s.phenotypes.copy_from_slice(&y[pos..pos + n]);
            pos += n;
        }
        Ok(out)
    }

    /// Sample variance of all phenotype values.
    pub fn phenotype_variance(&self) -> f64 {
        crate::stats::variance(&self.phenotypes()).unwrap_or(0.0)
    }
}

/// GRM restricted and reordered to the dataset's subjects.
pub fn align_grm(data: &LongitudinalDataset, grm: &Grm) -> Result<Grm> {
    let index: std::collections::HashMap<&str, usize> =
        grm.subject_ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let picks = data
        .subjects()
        .iter()
        .map(|s| {
            index
                .get(s.id.as_str())
                .copied()
                .ok_or_else(|| Error::IdMismatch(format!("subject {:?} missing from the GRM", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    grm.subset(&picks)
}

/// Errors unless the data subjects and GRM rows carry the same IDs in the same order.
pub fn check_aligned(data: &LongitudinalDataset, grm: &Grm) -> Result<()> {
    if data.n_subjects() != grm.n() {
        return Err(Error::IdMismatch(format!("{} subjects in the data, {} in the GRM", data.n_subjects(), grm.n())));
    }
    for (i, (s, g)) in data.subjects().iter().zip(grm.subject_ids()).enumerate() {
        if &s.id != g {
            return Err(Error::IdMismatch(format!("position {i}: data has {:?}, GRM has {g:?}", s.id)));
        }
    }
    Ok(())
}

/// `θ = (σ²_g, σ²_g*, σ²_b0, σ²_b1, σ²_e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2_g: f64,
    pub sigma2_gstar: f64,
    pub sigma2_b0: f64,
    pub sigma2_b1: f64,
    pub sigma2_e: f64,
}

impl VarianceComponents {
    pub fn new(sigma2_g: f64, sigma2_gstar: f64, sigma2_b0: f64, sigma2_b1: f64, sigma2_e: f64) -> Self {
        VarianceComponents { sigma2_g, sigma2_gstar, sigma2_b0, sigma2_b1, sigma2_e }
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        VarianceComponents::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn to_array(self) -> [f64; 5] {
        [self.sigma2_g, self.sigma2_gstar, self.sigma2_b0, self.sigma2_b1, self.sigma2_e]
    }

    pub fn zero() -> Self {
        VarianceComponents::from_array([0.0; 5])
    }

    pub fn is_nonnegative(&self) -> bool {
        self.to_array().iter().all(|&v| v >= 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid(format!("variance components must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    pub fn scaled(self, a: f64) -> Self {
        VarianceComponents::from_array(self.to_array().map(|v| v * a))
    }
}

/// Intercept and velocity heritability with the totals needed to invert the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeritabilityPair {
    /// `σ²_g / (σ²_g + σ²_b0)`; `None` when both components are zero.
    pub lambda1: Option<f64>,
    /// `σ²_g* / (σ²_g* + σ²_b1)`; `None` when both components are zero.
    pub lambda2: Option<f64>,
    pub xi3: f64,
    pub xi4: f64,
    pub xi5: f64,
}

impl HeritabilityPair {
    pub fn from_theta(theta: &VarianceComponents) -> Self {
        let xi3 = theta.sigma2_g + theta.sigma2_b0;
        let xi4 = theta.sigma2_gstar + theta.sigma2_b1;
        HeritabilityPair {
            lambda1: (xi3 > 0.0).then(|| theta.sigma2_g / xi3),
            lambda2: (xi4 > 0.0).then(|| theta.sigma2_gstar / xi4),
            xi3,
            xi4,
            xi5: theta.sigma2_e,
        }
    }

    /// `ξ = (λ₁, λ₂, ξ₃, ξ₄, ξ₅)` when both ratios are defined.
    pub fn xi(&self) -> Option<[f64; 5]> {
        Some([self.lambda1?, self.lambda2?, self.xi3, self.xi4, self.xi5])
    }

    /// Inverse map `ξ → θ`.
    pub fn theta_from_xi(xi: [f64; 5]) -> VarianceComponents {
        VarianceComponents::new(xi[0] * xi[2], xi[1] * xi[3], (1.0 - xi[0]) * xi[2], (1.0 - xi[1]) * xi[3], xi[4])
    }

    /// True when either ratio is undefined or sits on 0 or 1.
    pub fn at_boundary(&self) -> bool {
        [self.lambda1, self.lambda2].iter().any(|l| l.is_none_or(|v| v <= 0.0 || v >= 1.0))
    }
}

/// Record layout plus the GRM, exposing `H_s` products, traces and `V(θ)`.
pub struct CovarianceStructure<'a> {
    grm: &'a Grm,
    record_subject: Vec<usize>,
    times: Vec<f64>,
    /// Start offset of every subject's records, plus a trailing total.
    offsets: Vec<usize>,
    dense: Option<Vec<Mat<f64>>>,
}

impl<'a> CovarianceStructure<'a> {
    /// Implicit structure; `H_s` products and traces are computed from the GRM on demand.
    pub fn assemble(data: &LongitudinalDataset, grm: &'a Grm) -> Result<Self> {
        check_aligned(data, grm)?;
        let mut offsets = Vec::with_capacity(data.n_subjects() + 1);
        let mut pos = 0;
        for s in data.subjects() {
            offsets.push(pos);
            pos += s.n_records();
        }
        offsets.push(pos);
        Ok(CovarianceStructure {
            grm,
            record_subject: data.record_subjects(),
            times: data.times(),
            offsets,
            dense: None,
        })
    }

    /// Stores all five dense `H_s`; refused above `record_cap` records.
    pub fn materialize(&mut self, record_cap: usize) -> Result<()> {
        if self.n_records() > record_cap {
            return Err(Error::invalid(format!(
                "{} records exceed the dense cap of {record_cap}; partition the data",
                self.n_records()
            )));
        }
        if self.dense.is_none() {
            self.dense = Some((0..5).map(|s| self.build_h(s)).collect());
        }
        Ok(())
    }

    pub fn n_records(&self) -> usize {
        self.times.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn grm(&self) -> &Grm {
        self.grm
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn record_subjects(&self) -> &[usize] {
        &self.record_subject
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn is_materialized(&self) -> bool {
        self.dense.is_some()
    }

    /// Entry `(a, b)` of `H_s` (`s` zero-based).
    fn h_entry(&self, s: usize, a: usize, b: usize) -> f64 {
        let (i, k) = (self.record_subject[a], self.record_subject[b]);
        let tt = self.times[a] * self.times[b];
        match s {
            0 => self.grm.get(i, k),
            1 => self.grm.get(i, k) * tt,
            2 => f64::from(u8::from(i == k)),
            3 => {
                if i == k {
                    tt
                } else {
                    0.0
                }
            }
            4 => f64::from(u8::from(a == b)),
            _ => unreachable!("five components"),
        }
    }

    fn build_h(&self, s: usize) -> Mat<f64> {
        let n = self.n_records();
        Mat::from_fn(n, n, |a, b| self.h_entry(s, a, b))
    }

    /// Dense `H_s`, cloned from the materialised set or built on demand.
    pub fn h_matrix(&self, s: usize) -> Mat<f64> {
        match &self.dense {
            Some(h) => h[s].clone(),
            None => self.build_h(s),
        }
    }

    /// `Σ_{a ∈ i} u_a` and `Σ_{a ∈ i} t_a u_a` per subject.
    pub fn subject_sums(&self, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_subjects();
        let mut su = vec![0.0; n];
        let mut st = vec![0.0; n];
        for i in 0..n {
            for a in self.offsets[i]..self.offsets[i + 1] {
                su[i] += u[a];
                st[i] += self.times[a] * u[a];
            }
        }
        (su, st)
    }

    fn grm_times(&self, v: &[f64]) -> Vec<f64> {
        let g = self.grm.values();
        let n = v.len();
        let mut out = vec![0.0; n];
        for k in 0..n {
            let vk = v[k];
            if vk != 0.0 {
                for (i, o) in out.iter_mut().enumerate() {
                    *o += g[(i, k)] * vk;
                }
            }
        }
        out
    }

    /// `H_s u` without forming `H_s`.
    pub fn apply(&self, s: usize, u: &[f64]) -> Vec<f64> {
        assert_eq!(u.len(), self.n_records());
        if s == 4 {
            return u.to_vec();
        }
        let (su, st) = self.subject_sums(u);
        let w = match s {
            0 => self.grm_times(&su),
            1 => self.grm_times(&st),
            2 => su,
            3 => st,
            _ => unreachable!("five components"),
        };
        (0..u.len())
            .map(|a| {
                let i = self.record_subject[a];
                if s == 1 || s == 3 {
                    self.times[a] * w[i]
                } else {
                    w[i]
                }
            })
            .collect()
    }

    /// `tr(P H_s)` for symmetric `P`, via per-subject block sums.
    pub fn trace_product(&self, s: usize, p: &Mat<f64>) -> f64 {
        let n = self.n_records();
        if s == 4 {
            return (0..n).map(|a| p[(a, a)]).sum();
        }
        let ns = self.n_subjects();
        let weight = |a: usize| if s == 1 || s == 3 { self.times[a] } else { 1.0 };
        // block[i][k] = Σ_{a∈i, b∈k} w_a w_b P_ab
        let mut block = Mat::<f64>::zeros(ns, ns);
        for b in 0..n {
            let k = self.record_subject[b];
            let wb = weight(b);
            for a in 0..n {
                block[(self.record_subject[a], k)] += weight(a) * wb * p[(a, b)];
            }
        }
        match s {
            0 | 1 => {
                let g = self.grm.values();
                let mut acc = 0.0;
                for k in 0..ns {
                    for i in 0..ns {
                        acc += g[(i, k)] * block[(i, k)];
                    }
                }
                acc
            }
            _ => (0..ns).map(|i| block[(i, i)]).sum(),
        }
    }

    /// `V(θ) = Σ θ_s H_s`.
    pub fn assemble_v(&self, theta: &VarianceComponents) -> Mat<f64> {
        let th = theta.to_array();
        let n = self.n_records();
        match &self.dense {
            Some(h) => {
                let mut v = Mat::<f64>::zeros(n, n);
                for (s, hs) in h.iter().enumerate() {
                    if th[s] != 0.0 {
                        for b in 0..n {
                            for a in 0..n {
                                v[(a, b)] += th[s] * hs[(a, b)];
                            }
                        }
                    }
                }
                v
            }
            None => Mat::from_fn(n, n, |a, b| (0..5).map(|s| th[s] * self.h_entry(s, a, b)).sum()),
        }
    }
}

/// `E(y_ij y_km | Z, θ)` for every ordered record pair, straight from the moment formulas.
pub fn moment_expectations(data: &LongitudinalDataset, grm: &Grm, theta: &VarianceComponents) -> Result<Mat<f64>> {
    check_aligned(data, grm)?;
    let recs: Vec<(usize, usize, f64)> = data
        .subjects()
        .iter()
        .enumerate()
        .flat_map(|(i, s)| s.times.iter().enumerate().map(move |(j, &t)| (i, j, t)))
        .collect();
    let th = theta;
    Ok(Mat::from_fn(recs.len(), recs.len(), |a, b| {
        let (i, j, tij) = recs[a];
        let (k, m, tkm) = recs[b];
        if i != k {
            let g = grm.get(i, k);
            th.sigma2_g * g + th.sigma2_gstar * g * tkm * tij
        } else if j != m {
            let g = grm.get(i, i);
            th.sigma2_g * g + th.sigma2_gstar * g * tij * tkm + th.sigma2_b0 + th.sigma2_b1 * tij * tkm
        } else {
            let g = grm.get(i, i);
            th.sigma2_g * g + th.sigma2_gstar * g * tij * tij + th.sigma2_b0 + th.sigma2_b1 * tij * tij + th.sigma2_e
        }
    }))
}

/// Fixed-effect design `[1, t, covariates...]`, rejected when not of full column rank.
pub fn design_matrix(data: &LongitudinalDataset) -> Result<Mat<f64>> {
    let n = data.total_records();
    let q = 2 + data.covariate_names().len();
    let mut a = Mat::<f64>::zeros(n, q);
    let mut r = 0;
    for s in data.subjects() {
        for j in 0..s.n_records() {
            a[(r, 0)] = 1.0;
            a[(r, 1)] = s.times[j];
            for (l, v) in s.covariates[j].iter().enumerate() {
                a[(r, 2 + l)] = *v;
            }
            r += 1;
        }
    }
    check_full_rank(&a)?;
    Ok(a)
}

/// Modified Gram-Schmidt; reports the first column that is (numerically) spanned by earlier ones.
pub fn check_full_rank(a: &Mat<f64>) -> Result<()> {
    let (n, q) = (a.nrows(), a.ncols());
    if n < q {
        return Err(Error::RankDeficient { column: n });
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(q);
    for j in 0..q {
        let mut v: Vec<f64> = (0..n).map(|i| a[(i, j)]).collect();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for b in &basis {
            let proj = crate::linalg::dot(b, &v);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= proj * bi);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 || norm <= 1e-10 * norm0 {
            return Err(Error::RankDeficient { column: j });
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random PSD GRM (`B Bᵀ / p`) and a ragged dataset with the given record counts.
    pub fn random_instance(counts: &[usize], seed: u64) -> (LongitudinalDataset, Grm) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = counts.len();
        let p = n + 3;
        let b = Mat::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let g = &b * b.transpose() * faer::Scale(1.0 / p as f64);
        let ids: Vec<String> = (0..n).map(|i| format!("id{i}")).collect();
        let grm = Grm::from_parts(g, ids.clone(), p).unwrap();
        let subjects = counts
            .iter()
            .zip(&ids)
            .map(|(&c, id)| {
                let times = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
                let y = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
                Subject::new(id.clone(), times, y)
            })
            .collect();
        (LongitudinalDataset::new(subjects, vec![]).unwrap(), grm)
    }

    pub fn random_theta(rng: &mut impl Rng) -> VarianceComponents {
        VarianceComponents::from_array(std::array::from_fn(|_| rng.random_range(0.0..3.0)))
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &Mat<f64>, b: &Mat<f64>) -> f64 {
        let mut m = 0.0f64;
        for j in 0..a.ncols() {
            for i in 0..a.nrows() {
                m = m.max((a[(i, j)] - b[(i, j)]).abs());
            }
        }
        m
    }

    #[test]
    fn scalar_structure() {
        let (tau, gamma) = (0.7, 1.3);
        let grm = Grm::from_parts(Mat::from_fn(1, 1, |_, _| gamma), vec!["a".into()], 1).unwrap();
        let data = LongitudinalDataset::new(vec![Subject::new("a", vec![tau], vec![1.0])], vec![]).unwrap();
        let cs = CovarianceStructure::assemble(&data, &grm).unwrap();
        let expect = [gamma, gamma * tau * tau, 1.0, tau * tau, 1.0];
        for (s, e) in expect.iter().enumerate() {
            assert!((cs.h_matrix(s)[(0, 0)] - e).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_time_degeneracy() {
        let g = Mat::from_fn(2, 2, |i, k| if i == k { 1.0 } else { 0.2 });
        let grm = Grm::from_parts(g, vec!["a".into(), "b".into()], 1).unwrap();
        let data = LongitudinalDataset::new(
            vec![Subject::new("a", vec![0.0], vec![1.0]), Subject::new("b", vec![0.0], vec![2.0])],
            vec![],
        )
        .unwrap();
        let cs = CovarianceStructure::assemble(&data, &grm).unwrap();
        assert!(max_abs_diff(&cs.h_matrix(1), &Mat::zeros(2, 2)) == 0.0);
        assert!(max_abs_diff(&cs.h_matrix(3), &Mat::zeros(2, 2)) == 0.0);
        assert!(max_abs_diff(&cs.h_matrix(0), grm.values()) == 0.0);
        assert!(max_abs_diff(&cs.h_matrix(2), &Mat::identity(2, 2)) == 0.0);
    }

    #[test]
    fn v_matches_moment_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (data, grm) = random_instance(&[2, 1, 2], 11);
        let cs = CovarianceStructure::assemble(&data, &grm).unwrap();
        for _ in 0..5 {
            let th = random_theta(&mut rng);
            let v = cs.assemble_v(&th);
            let m = moment_expectations(&data, &grm, &th).unwrap();
            assert!(max_abs_diff(&v, &m) <= 1e-12);
        }
        let scen1 = VarianceComponents::new(2.0, 2.0, 2.0, 2.0, 0.1);
        let v = cs.assemble_v(&scen1);
        assert!(max_abs_diff(&v, &moment_expectations(&data, &grm, &scen1).unwrap()) <= 1e-12);
    }

    #[test]
    fn basis_extraction_and_pure_residual() {
        let (data, grm) = random_instance(&[3, 2], 5);
        let cs = CovarianceStructure::assemble(&data, &grm).unwrap();
        let v = cs.assemble_v(&VarianceComponents::new(0.0, 0.0, 0.0, 0.0, 1.0));
        assert_eq!(max_abs_diff(&v, &Mat::identity(5, 5)), 0.0);
        for s in 0..5 {
            let mut e = [0.0; 5];
            e[s] = 1.0;
            let v = cs.assemble_v(&VarianceComponents::from_array(e));
            assert_eq!(max_abs_diff(&v, &cs.h_matrix(s)), 0.0);
        }
    }

    #[test]
    fn implicit_and_materialized_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (data, grm) = random_instance(&[3, 1, 4, 2], 21);
        let mut dense = CovarianceStructure::assemble(&data, &grm).unwrap();
        dense.materialize(DEFAULT_RECORD_CAP).unwrap();
        let lazy = CovarianceStructure::assemble(&data, &grm).unwrap();
        let mut capped = CovarianceStructure::assemble(&data, &grm).unwrap();
        assert!(capped.materialize(3).is_err());
        assert!(dense.is_materialized() && !lazy.is_materialized());
        let th = random_theta(&mut rng);
        assert!(max_abs_diff(&dense.assemble_v(&th), &lazy.assemble_v(&th)) <= 1e-12);
        let n = dense.n_records();
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = Mat::from_fn(n, n, |a, b| ((a * 7 + b * 7) % 5) as f64 - 2.0 + if a == b { 3.0 } else { 0.0 });
        for s in 0..5 {
            let h = dense.h_matrix(s);
            let direct: Vec<f64> = (0..n).map(|a| (0..n).map(|b| h[(a, b)] * u[b]).sum()).collect();
            let applied = lazy.apply(s, &u);
            for a in 0..n {
                assert!((direct[a] - applied[a]).abs() < 1e-12);
            }
            let tr: f64 = (0..n).map(|a| (0..n).map(|b| p[(a, b)] * h[(b, a)]).sum::<f64>()).sum();
            assert!((tr - lazy.trace_product(s, &p)).abs() < 1e-10);
        }
    }

    #[test]
    fn linearity_and_grm_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (data, grm) = random_instance(&[2, 3, 1], 4);
        let cs = CovarianceStructure::assemble(&data, &grm).unwrap();
        let a = random_theta(&mut rng);
        let b = random_theta(&mut rng);
        let sum = VarianceComponents::from_array(std::array::from_fn(|s| a.to_array()[s] + b.to_array()[s]));
        let lhs = cs.assemble_v(&sum);
        let rhs = &cs.assemble_v(&a) + &cs.assemble_v(&b);
        assert!(max_abs_diff(&lhs, &rhs) <= 1e-12);

        let g2 = Grm::from_parts(grm.values() * faer::Scale(2.0), grm.subject_ids().to_vec(), 1).unwrap();
        let cs2 = CovarianceStructure::assemble(&data, &g2).unwrap();
        for s in 0..2 {
            assert_eq!(max_abs_diff(&cs2.h_matrix(s), &(cs.h_matrix(s) * faer::Scale(2.0))), 0.0);
        }
        for s in 2..5 {
            assert_eq!(max_abs_diff(&cs2.h_matrix(s), &cs.h_matrix(s)), 0.0);
        }
    }

    #[test]
    fn moment_edge_cases() {
        let (data, grm) = random_instance(&[2, 2], 8);
        let m = moment_expectations(&data, &grm, &VarianceComponents::zero()).unwrap();
        assert_eq!(max_abs_diff(&m, &Mat::zeros(4, 4)), 0.0);
        let g = Mat::from_fn(2, 2, |i, k| if i == k { 1.0 } else { 0.0 });
        let grm0 = Grm::from_parts(g, grm.subject_ids().to_vec(), 1).unwrap();
        let m = moment_expectations(&data, &grm0, &VarianceComponents::new(1.0, 2.0, 3.0, 4.0, 5.0)).unwrap();
        assert_eq!(m[(0, 2)], 0.0);
        assert_eq!(m[(3, 1)], 0.0);
    }

    #[test]
    fn design_matrix_cases() {
        let data = LongitudinalDataset::new(vec![Subject::new("a", vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 3.0])], vec![])
            .unwrap();
        let a = design_matrix(&data).unwrap();
        assert_eq!(a.ncols(), 2);
        let expect = [[1.0, 0.0], [1.0, 0.5], [1.0, 1.0]];
        for i in 0..3 {
            for j in 0..2 {
                assert_eq!(a[(i, j)], expect[i][j]);
            }
        }
        let mut s = Subject::new("a", vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 3.0]);
        s.covariates = vec![vec![0.0], vec![0.5], vec![1.0]];
        let dup = LongitudinalDataset::new(vec![s], vec!["age".into()]).unwrap();
        match design_matrix(&dup) {
            Err(Error::RankDeficient { column }) => assert_eq!(column, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn heritability_round_trip() {
        let h = HeritabilityPair::from_theta(&VarianceComponents::new(1.0, 1.0, 1.0, 1.0, 1.0));
        assert_eq!(h.xi(), Some([0.5, 0.5, 2.0, 2.0, 1.0]));
        let th = VarianceComponents::new(2.0, 0.5, 0.5, 2.0, 0.1);
        let h = HeritabilityPair::from_theta(&th);
        let xi = h.xi().unwrap();
        for (a, b) in xi.iter().zip([0.8, 0.2, 2.5, 2.5, 0.1]) {
            assert!((a - b).abs() < 1e-15);
        }
        let back = HeritabilityPair::theta_from_xi(xi).to_array();
        for (a, b) in back.iter().zip(th.to_array()) {
            assert!((a - b).abs() <= 1e-12);
        }
        let h = HeritabilityPair::from_theta(&VarianceComponents::new(0.0, 1.0, 0.0, 0.0, 1.0));
        assert_eq!(h.lambda1, None);
        assert_eq!(h.lambda2, Some(1.0));
    }

    #[test]
    fn alignment_checks_ids() {
        let (data, grm) = random_instance(&[1, 1, 1], 2);
        let sub = data.subset(&[2, 0]).unwrap();
        assert!(CovarianceStructure::assemble(&sub, &grm).is_err());
        let g = align_grm(&sub, &grm).unwrap();
        assert_eq!(g.subject_ids(), &["id2".to_string(), "id0".to_string()]);
        assert!(CovarianceStructure::assemble(&sub, &g).is_ok());
    }
}
