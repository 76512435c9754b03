//! Synthetic genotypes and longitudinal phenotypes, and multi-replicate experiments that
//! summarise estimator behaviour.

use faer::Mat;
use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aireml::{ai_reml_fit, RemlOptions};
use crate::error::{Error, Result};
use crate::grm::{compute_grm, standardize_genotypes, GenotypeMatrix, Grm, DEFAULT_CHUNK};
use crate::meta::{combine_fits, partition_subjects, MetaOptions};
use crate::model::{align_grm, LongitudinalDataset, Subject, VarianceComponents};
use crate::rehe::{rehe_fit, PARAMETER_NAMES};
use crate::seed::derive_seed;
use crate::stats;

pub const DEFAULT_BETA: [f64; 2] = [-0.2118, 0.8415];
pub const AGE_ORIGIN: f64 = 54.0;
pub const AGE_SCALE: f64 = 30.0;
pub const LAST_ENTRY_AGE: f64 = 74.0;
pub const MAX_AGE: f64 = 84.0;

/// Binomial(2, AF) dosages with AF ~ Uniform(maf_range).
pub fn simulate_genotypes(n: usize, p: usize, maf_range: (f64, f64), seed: u64) -> Result<GenotypeMatrix> {
    let (lo, hi) = maf_range;
    if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
        return Err(Error::invalid(format!("allele frequency range ({lo}, {hi}) must lie in (0, 0.5]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let afs: Vec<f64> = (0..p).map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) }).collect();
    let draws: Vec<Binomial> = afs.iter().map(|&af| Binomial::new(2, af).expect("af in (0, 0.5]")).collect();
    let mut dosages = Mat::<f64>::zeros(n, p);
    for i in 0..n {
        for (j, d) in draws.iter().enumerate() {
            dosages[(i, j)] = d.sample(&mut rng) as f64;
        }
    }
    let ids = (0..n).map(|i| format!("S{:05}", i + 1)).collect();
    let vids = (0..p).map(|j| format!("V{:06}", j + 1)).collect();
    GenotypeMatrix::new(dosages, Some(afs), ids, vids)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrmMode {
    /// GRM from the causal variants only.
    CausalOnly,
    /// GRM from every simulated variant.
    AllVariants,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSpec {
    Aireml,
    AiremlPartition { partitions: usize },
    Rehe,
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Aireml => "aireml".into(),
            MethodSpec::AiremlPartition { partitions } => format!("aireml_m{partitions}"),
            MethodSpec::Rehe => "rehe".into(),
        }
    }
}

fn default_beta() -> [f64; 2] {
    DEFAULT_BETA
}
fn default_maf() -> (f64, f64) {
    (0.05, 0.5)
}
fn default_true() -> bool {
    true
}
fn default_methods() -> Vec<MethodSpec> {
    vec![MethodSpec::Aireml, MethodSpec::Rehe]
}
fn default_grm_mode() -> GrmMode {
    GrmMode::CausalOnly
}
fn default_name() -> String {
    "custom".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub theta: VarianceComponents,
    pub n_subjects: usize,
    /// Annual visits per subject.
    pub visits: usize,
    pub n_variants: usize,
    pub n_causal: usize,
    #[serde(default = "default_beta")]
    pub beta: [f64; 2],
    #[serde(default = "default_maf")]
    pub maf_range: (f64, f64),
    pub seed: u64,
    pub reps: usize,
    #[serde(default = "default_grm_mode")]
    pub grm_mode: GrmMode,
    /// Draw new genotypes (and causal set) for every replicate.
    #[serde(default = "default_true")]
    pub fresh_genotypes: bool,
    #[serde(default = "default_methods")]
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub reml: Option<RemlOptions>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    I,
    II,
    III,
}

impl Scenario {
    pub fn theta(self) -> VarianceComponents {
        match self {
            Scenario::I => VarianceComponents::new(2.0, 2.0, 2.0, 2.0, 0.1),
            Scenario::II => VarianceComponents::new(2.0, 0.5, 0.5, 2.0, 0.1),
            Scenario::III => VarianceComponents::new(0.5, 2.0, 2.0, 0.5, 0.1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scenario::I => "I",
            Scenario::II => "II",
            Scenario::III => "III",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "I" | "1" => Some(Scenario::I),
            "II" | "2" => Some(Scenario::II),
            "III" | "3" => Some(Scenario::III),
            _ => None,
        }
    }
}

impl ScenarioConfig {
    /// Desk-scale preset: 300 subjects, 2,000 causal variants, 6 visits, 200 replicates.
    pub fn desk(scenario: Scenario, seed: u64) -> Self {
        ScenarioConfig {
            name: scenario.name().into(),
            theta: scenario.theta(),
            n_subjects: 300,
            visits: 6,
            n_variants: 2000,
            n_causal: 2000,
            beta: DEFAULT_BETA,
            maf_range: default_maf(),
            seed,
            reps: 200,
            grm_mode: GrmMode::CausalOnly,
            fresh_genotypes: true,
            methods: default_methods(),
            reml: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::invalid(format!("{field}: {why}")));
        self.theta.validate().map_err(|_| Error::invalid("theta: components must be finite and >= 0"))?;
        if self.n_subjects < 2 {
            return bad("n_subjects", "need at least 2");
        }
        if self.visits == 0 {
            return bad("visits", "need at least 1");
        }
        if self.visits as f64 - 1.0 > MAX_AGE - AGE_ORIGIN {
            return bad("visits", "annual visits would run past the last age");
        }
        if self.n_causal == 0 || self.n_causal > self.n_variants {
            return bad("n_causal", "must be in 1..=n_variants");
        }
        if self.reps == 0 {
            return bad("reps", "need at least 1");
        }
        if self.methods.is_empty() {
            return bad("methods", "need at least one method");
        }
        for m in &self.methods {
            if let MethodSpec::AiremlPartition { partitions } = m {
                if *partitions == 0 || *partitions > self.n_subjects {
                    return bad("methods.partitions", "must be in 1..=n_subjects");
                }
            }
        }
        let (lo, hi) = self.maf_range;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return bad("maf_range", "must lie in (0, 0.5]");
        }
        if let Some(r) = &self.reml {
            r.validate()?;
        }
        Ok(())
    }
}

/// Latent effects behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub causal: Vec<usize>,
    pub g: Vec<f64>,
    pub gstar: Vec<f64>,
    pub b0: Vec<f64>,
    pub b1: Vec<f64>,
}

fn normal_vec(rng: &mut impl Rng, n: usize, var: f64) -> Vec<f64> {
    let sd = var.sqrt();
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Phenotypes on `geno`'s subjects using the causal variants in `causal`.
pub fn simulate_phenotypes(
    config: &ScenarioConfig,
    geno: &GenotypeMatrix,
    causal: &[usize],
    seed: u64,
) -> Result<(LongitudinalDataset, Truth)> {
    let n = geno.n_subjects();
    let pc = causal.len();
    let z = standardize_genotypes(&geno.select_variants(causal))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alpha = normal_vec(&mut rng, pc, config.theta.sigma2_g / pc as f64);
    let eta = normal_vec(&mut rng, pc, config.theta.sigma2_gstar / pc as f64);
    let mut g = vec![0.0; n];
    let mut gstar = vec![0.0; n];
    for p in 0..pc {
        for i in 0..n {
            let zv = z.values[(i, p)];
            g[i] += zv * alpha[p];
            gstar[i] += zv * eta[p];
        }
    }
    let b0 = normal_vec(&mut rng, n, config.theta.sigma2_b0);
    let b1 = normal_vec(&mut rng, n, config.theta.sigma2_b1);
    let last_entry = LAST_ENTRY_AGE.min(MAX_AGE - (config.visits as f64 - 1.0));
    let e_sd = config.theta.sigma2_e.sqrt();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let subjects = (0..n)
        .map(|i| {
            let entry = if last_entry > AGE_ORIGIN { rng.random_range(AGE_ORIGIN..=last_entry) } else { AGE_ORIGIN };
            let times: Vec<f64> = (0..config.visits).map(|j| (entry + j as f64 - AGE_ORIGIN) / AGE_SCALE).collect();
            let y = times
                .iter()
                .map(|&t| {
                    config.beta[0]
                        + config.beta[1] * t
                        + g[i]
                        + gstar[i] * t
                        + b0[i]
                        + b1[i] * t
                        + e_sd * noise.sample(&mut rng)
                })
                .collect();
            Subject::new(geno.subject_ids()[i].clone(), times, y)
        })
        .collect();
    Ok((LongitudinalDataset::new(subjects, vec![])?, Truth { causal: causal.to_vec(), g, gstar, b0, b1 }))
}

pub fn draw_causal(n_variants: usize, n_causal: usize, seed: u64) -> Vec<usize> {
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), n_variants, n_causal).into_vec();
    idx.sort_unstable();
    idx
}

/// One replicate's inputs: genotypes, causal set, dataset, truth and GRM.
pub struct SimulatedReplicate {
    pub genotypes: GenotypeMatrix,
    pub data: LongitudinalDataset,
    pub truth: Truth,
    pub grm: Grm,
}

pub fn simulate_scenario(config: &ScenarioConfig, replicate: u64) -> Result<SimulatedReplicate> {
    config.validate()?;
    let g_index = if config.fresh_genotypes { replicate } else { 0 };
    let genotypes = simulate_genotypes(
        config.n_subjects,
        config.n_variants,
        config.maf_range,
        derive_seed(config.seed, "genotypes", g_index),
    )?;
    let causal = draw_causal(config.n_variants, config.n_causal, derive_seed(config.seed, "causal", g_index));
    let (data, truth) =
        simulate_phenotypes(config, &genotypes, &causal, derive_seed(config.seed, "phenotypes", replicate))?;
    let grm_input = match config.grm_mode {
        GrmMode::CausalOnly => genotypes.select_variants(&causal),
        GrmMode::AllVariants => genotypes.clone(),
    };
    let grm = compute_grm(&standardize_genotypes(&grm_input)?, DEFAULT_CHUNK)?;
    Ok(SimulatedReplicate { genotypes, data, truth, grm })
}

/// Point estimates `(θ, λ₁, λ₂)` and model-based SEs of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub estimates: Option<[Option<f64>; 7]>,
    pub ses: [Option<f64>; 7],
    pub converged: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub methods: Vec<MethodOutcome>,
}

fn run_method(
    method: &MethodSpec,
    data: &LongitudinalDataset,
    grm: &Grm,
    reml: &RemlOptions,
    seed: u64,
    replicate: u64,
) -> Result<MethodOutcome> {
    let label = method.label();
    match method {
        MethodSpec::Aireml => {
            let f = ai_reml_fit(data, grm, reml)?;
            let t = f.theta_hat.to_array();
            let se_t = f.se_theta.map(|s| s.map(Some)).unwrap_or([None; 5]);
            let se_l = f.lambda_se();
            Ok(MethodOutcome {
                method: label,
                estimates: Some([
                    Some(t[0]),
                    Some(t[1]),
                    Some(t[2]),
                    Some(t[3]),
                    Some(t[4]),
                    f.xi_hat.lambda1,
                    f.xi_hat.lambda2,
                ]),
                ses: [se_t[0], se_t[1], se_t[2], se_t[3], se_t[4], se_l[0], se_l[1]],
                converged: f.converged,
                error: None,
            })
        }
        MethodSpec::AiremlPartition { partitions } => {
            let plan = partition_subjects(data.n_subjects(), *partitions, derive_seed(seed, "partition", replicate))?;
            let mut fits = Vec::with_capacity(*partitions);
            for group in plan.groups() {
                let part = data.subset(&group)?;
                let pgrm = align_grm(&part, grm)?;
                fits.push(ai_reml_fit(&part, &pgrm, reml)?);
            }
            let combined = combine_fits(&fits, &MetaOptions::default())?;
            Ok(MethodOutcome {
                method: label,
                estimates: Some(std::array::from_fn(|p| Some(combined[p].primary.combined))),
                ses: std::array::from_fn(|p| combined[p].primary.se),
                converged: fits.iter().all(|f| f.converged),
                error: None,
            })
        }
        MethodSpec::Rehe => {
            let f = rehe_fit(data, grm)?;
            Ok(MethodOutcome {
                method: label,
                estimates: Some(f.parameters()),
                ses: [None; 7],
                converged: true,
                error: None,
            })
        }
    }
}

pub fn run_replicate(config: &ScenarioConfig, replicate: usize) -> ReplicateOutcome {
    let reml = config.reml.unwrap_or_default();
    let sim = simulate_scenario(config, replicate as u64);
    let methods = config
        .methods
        .iter()
        .map(|m| {
            let res = sim
                .as_ref()
                .map_err(|e| Error::Numerical(e.to_string()))
                .and_then(|s| run_method(m, &s.data, &s.grm, &reml, config.seed, replicate as u64));
            res.unwrap_or_else(|e| {
                warn!("replicate {replicate}, {}: {e}", m.label());
                MethodOutcome {
                    method: m.label(),
                    estimates: None,
                    ses: [None; 7],
                    converged: false,
                    error: Some(e.to_string()),
                }
            })
        })
        .collect();
    ReplicateOutcome { replicate, methods }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub scenario: String,
    pub method: String,
    pub truth: Option<f64>,
    pub mean: Option<f64>,
    pub median: Option<f64>,
    /// Mean of model-based SEs (absent for methods without them).
    pub se: Option<f64>,
    pub emp_se: Option<f64>,
    pub mad: Option<f64>,
    pub n_ok: usize,
    pub n_failed: usize,
    pub n_unconverged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config: ScenarioConfig,
    pub replicates: Vec<ReplicateOutcome>,
    pub rows: Vec<SummaryRow>,
}

impl ExperimentSummary {
    pub fn row(&self, method: &str, parameter: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.parameter == parameter)
    }

    /// Replicate estimates of one parameter for one method, skipping failures and undefined values.
    pub fn values(&self, method: &str, parameter: &str) -> Vec<f64> {
        let p = PARAMETER_NAMES.iter().position(|n| *n == parameter).expect("known parameter");
        self.replicates
            .iter()
            .filter_map(|r| r.methods.iter().find(|m| m.method == method))
            .filter_map(|m| m.estimates.and_then(|e| e[p]))
            .collect()
    }
}

fn truth_values(theta: &VarianceComponents) -> [Option<f64>; 7] {
    let t = theta.to_array();
    let h = crate::model::HeritabilityPair::from_theta(theta);
    [Some(t[0]), Some(t[1]), Some(t[2]), Some(t[3]), Some(t[4]), h.lambda1, h.lambda2]
}

pub fn summarize(config: &ScenarioConfig, replicates: Vec<ReplicateOutcome>) -> ExperimentSummary {
    let truth = truth_values(&config.theta);
    let mut rows = Vec::new();
    for m in &config.methods {
        let label = m.label();
        let outcomes: Vec<&MethodOutcome> =
            replicates.iter().filter_map(|r| r.methods.iter().find(|o| o.method == label)).collect();
        let n_failed = outcomes.iter().filter(|o| o.estimates.is_none()).count();
        let n_unconverged = outcomes.iter().filter(|o| o.estimates.is_some() && !o.converged).count();
        for (p, name) in PARAMETER_NAMES.iter().enumerate() {
            let vals: Vec<f64> = outcomes.iter().filter_map(|o| o.estimates.and_then(|e| e[p])).collect();
            let ses: Vec<f64> = outcomes.iter().filter(|o| o.estimates.is_some()).filter_map(|o| o.ses[p]).collect();
            rows.push(SummaryRow {
                parameter: name.to_string(),
                scenario: config.name.clone(),
                method: label.clone(),
                truth: truth[p],
                mean: stats::mean(&vals),
                median: stats::median(&vals),
                se: stats::mean(&ses),
                emp_se: stats::sd(&vals),
                mad: stats::scaled_mad(&vals),
                n_ok: vals.len(),
                n_failed,
                n_unconverged,
            });
        }
    }
    ExperimentSummary { config: config.clone(), replicates, rows }
}

/// Runs every replicate (in parallel, collected in replicate order) and summarises.
pub fn run_experiment(config: &ScenarioConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let replicates: Vec<ReplicateOutcome> =
        (0..config.reps).into_par_iter().map(|r| run_replicate(config, r)).collect();
    Ok(summarize(config, replicates))
}
