//! Command-line front end. Every subcommand writes its outputs plus one `manifest.json` into
//! `--out-dir`; primary outputs depend only on inputs, flags and `--seed`.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::aireml::{ai_reml_fit, EngineChoice, FitResult, RemlOptions};
use crate::error::{Error, Result};
use crate::grm::{compute_grm, standardize_genotypes, DEFAULT_CHUNK, DEFAULT_MAF};
use crate::io::{self, fmt_opt, Table};
use crate::meta::{
    combine_estimates, combine_fits, partition_subjects, CombinedParameter, MetaOptions, PartitionEstimates, Regime,
};
use crate::model::{align_grm, COMPONENT_NAMES};
use crate::rehe::{parametric_bootstrap, rehe_fit, CiMethod, PARAMETER_NAMES};
use crate::seed::derive_seed;
use crate::sim::{run_experiment, simulate_scenario, ExperimentSummary, ScenarioConfig};

pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Default zero replacement before a log transform.
pub const DEFAULT_ZERO_REPLACE: f64 = 0.005;

#[derive(Debug, Parser)]
#[command(name = "lgh", version, about = "Longitudinal genetic heritability estimation")]
pub struct Cli {
    /// Worker threads (falls back to LGH_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Log level: error, warn, info, debug.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a GRM from genotypes.
    Grm(GrmArgs),
    /// Clean a phenotype file: log transform, zero replacement, time rescaling.
    Preprocess(PreprocessArgs),
    /// Fit variance components by AI-REML or REHE.
    Fit(FitArgs),
    /// Simulate one dataset from a scenario manifest.
    Simulate(SimulateArgs),
    /// Run a multi-replicate experiment from a scenario manifest.
    Experiment(ExperimentArgs),
    /// Combine partition estimates from a TSV.
    MetaCombine(MetaCombineArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GrmArgs {
    /// Genotype TSV or LGH1 binary.
    #[arg(long)]
    pub geno: PathBuf,
    /// Allele frequency TSV; estimated from the dosages when absent.
    #[arg(long)]
    pub af: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = DEFAULT_MAF)]
    pub maf: f64,
    #[arg(long, default_value_t = DEFAULT_CHUNK)]
    pub chunk: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeRescale {
    None,
    /// `(t − 54) / 30`.
    Plco,
    /// `(t − min) / range`.
    Span,
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub pheno: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub log_transform: bool,
    /// Value substituted for zeros before the log transform.
    #[arg(long, default_value_t = DEFAULT_ZERO_REPLACE)]
    pub zero_replace: f64,
    #[arg(long, value_enum, default_value_t = TimeRescale::None)]
    pub time_rescale: TimeRescale,
    /// Origin for `span` (default: smallest time in the file).
    #[arg(long)]
    pub span_min: Option<f64>,
    /// Range for `span` (default: largest minus smallest time).
    #[arg(long)]
    pub span_range: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    Aireml,
    Rehe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineArg {
    Auto,
    Dense,
    Lowrank,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub pheno: PathBuf,
    /// GRM1 binary (with its `.id` file).
    #[arg(long)]
    pub grm: PathBuf,
    #[arg(long, value_enum, default_value_t = FitMethod::Aireml)]
    pub method: FitMethod,
    /// Number of random subject partitions for AI-REML.
    #[arg(long, default_value_t = 1)]
    pub partitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// REHE parametric bootstrap replicates.
    #[arg(long, default_value_t = 0)]
    pub bootstrap: usize,
    #[arg(long, value_enum, default_value_t = EngineArg::Auto)]
    pub engine: EngineArg,
    #[arg(long, default_value_t = 200)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// Scenario manifest (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub replicate: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct MetaCombineArgs {
    /// TSV with columns parameter, estimate, se, regime.
    #[arg(long)]
    pub input: PathBuf,
    /// Variance estimates at or below this count as zeros.
    #[arg(long, default_value_t = 0.0)]
    pub zero_threshold: f64,
    /// Ratio estimates within this distance of 0 or 1 count as boundary values.
    #[arg(long, default_value_t = crate::meta::DEFAULT_LAMBDA_TOL)]
    pub lambda_tol: f64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

/// Run-varying fields, kept together so everything else in a manifest is reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub started_unix: f64,
    pub wall_clock_seconds: f64,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub inputs: Vec<InputDigest>,
    pub options: serde_json::Value,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
    pub report: serde_json::Value,
    pub timing: Timing,
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Run {
    subcommand: &'static str,
    start: Instant,
    started_unix: f64,
    inputs: Vec<InputDigest>,
    outputs: Vec<String>,
    out_dir: PathBuf,
}

impl Run {
    fn new(subcommand: &'static str, out_dir: &Path, inputs: &[&Path]) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.display().to_string(), sha256: io::file_digest(p)? }))
            .collect::<Result<Vec<_>>>()?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        Ok(Run {
            subcommand,
            start: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
            inputs,
            outputs: vec![],
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.out_dir.join(name)
    }

    fn finish(self, options: &impl Serialize, seed: Option<u64>, report: serde_json::Value) -> Result<()> {
        let manifest = RunManifest {
            subcommand: self.subcommand.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            inputs: self.inputs,
            options: serde_json::to_value(options)?,
            seed,
            outputs: self.outputs,
            report,
            timing: Timing {
                started_unix: self.started_unix,
                wall_clock_seconds: self.start.elapsed().as_secs_f64(),
                threads: rayon::current_num_threads(),
            },
        };
        io::write_json(&self.out_dir.join(MANIFEST_FILE), &manifest)
    }
}

pub fn cmd_grm(args: &GrmArgs) -> Result<()> {
    if !(0.0..=0.5).contains(&args.maf) || args.chunk == 0 {
        return Err(Error::invalid("--maf must lie in [0, 0.5] and --chunk must be positive"));
    }
    let mut inputs = vec![args.geno.as_path()];
    inputs.extend(args.af.as_deref());
    let mut run = Run::new("grm", &args.out_dir, &inputs)?;
    let geno = io::read_genotypes(&args.geno, args.af.as_deref())?;
    let kept = geno.filter_maf(args.maf);
    let removed = geno.n_variants() - kept.n_variants();
    info!("MAF filter {}: kept {} of {} variants", args.maf, kept.n_variants(), geno.n_variants());
    let grm = compute_grm(&standardize_genotypes(&kept)?, args.chunk)?;
    if !grm.sanity_check() {
        warn!("GRM diagonal mean {} is far from 1", grm.diag_mean());
    }
    let out = run.path("grm.bin");
    run.outputs.push("grm.bin.id".into());
    io::write_grm(&out, &grm)?;
    let report = serde_json::json!({
        "subjects": grm.n(),
        "variants_in": geno.n_variants(),
        "variants_used": kept.n_variants(),
        "variants_removed_by_maf": removed,
        "allele_freqs_estimated": args.af.is_none(),
        "diag_mean": grm.diag_mean(),
    });
    run.finish(args, None, report)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PreprocessReport {
    pub records_read: usize,
    pub dropped_missing: usize,
    pub zeros_replaced: usize,
    pub records_written: usize,
    pub time_origin: Option<f64>,
    pub time_range: Option<f64>,
}

/// Applies the transforms to a phenotype table in place. Untouched cells keep their text.
pub fn preprocess_table(table: &mut Table, args: &PreprocessArgs) -> Result<PreprocessReport> {
    let (ti, yi) = match (table.column("time"), table.column("y")) {
        (Some(t), Some(y)) if table.column("subject_id") == Some(0) => (t, y),
        _ => return Err(Error::invalid("phenotype header must contain subject_id (first), time and y")),
    };
    let mut report = PreprocessReport { records_read: table.rows.len(), ..Default::default() };
    let before = table.rows.len();
    table.rows.retain(|r| !r[1..].iter().any(|c| io::MISSING_TOKENS.contains(&c.as_str())));
    report.dropped_missing = before - table.rows.len();
    let parse = |s: &str, row: usize, what: &str| {
        s.parse::<f64>().map_err(|_| Error::invalid(format!("data row {row}: cannot parse {what} {s:?}")))
    };
    if args.log_transform {
        if !(args.zero_replace > 0.0) {
            return Err(Error::invalid("--zero-replace must be positive under --log-transform"));
        }
        let mut bad = Vec::new();
        for (k, r) in table.rows.iter_mut().enumerate() {
            let mut y = parse(&r[yi], k + 1, "y")?;
            if y == 0.0 {
                y = args.zero_replace;
                report.zeros_replaced += 1;
            }
            if y <= 0.0 {
                bad.push(k + 1);
                continue;
            }
            r[yi] = y.ln().to_string();
        }
        if !bad.is_empty() {
            return Err(Error::invalid(format!(
                "non-positive phenotypes cannot be log transformed (data rows {bad:?})"
            )));
        }
    }
    let (origin, range) = match args.time_rescale {
        TimeRescale::None => (None, None),
        TimeRescale::Plco => (Some(54.0), Some(30.0)),
        TimeRescale::Span => {
            let times = table
                .rows
                .iter()
                .enumerate()
                .map(|(k, r)| parse(&r[ti], k + 1, "time"))
                .collect::<Result<Vec<f64>>>()?;
            let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let origin = args.span_min.unwrap_or(lo);
            (Some(origin), Some(args.span_range.unwrap_or(hi - origin)))
        }
    };
    if let (Some(o), Some(w)) = (origin, range) {
        if !(w > 0.0) || !w.is_finite() {
            return Err(Error::invalid(format!("time rescaling range must be positive, got {w}")));
        }
        for (k, r) in table.rows.iter_mut().enumerate() {
            r[ti] = ((parse(&r[ti], k + 1, "time")? - o) / w).to_string();
        }
    }
    report.time_origin = origin;
    report.time_range = range;
    report.records_written = table.rows.len();
    Ok(report)
}

pub fn cmd_preprocess(args: &PreprocessArgs) -> Result<()> {
    let mut run = Run::new("preprocess", &args.out_dir, &[&args.pheno])?;
    let mut table = Table::read(&args.pheno)?;
    let report = preprocess_table(&mut table, args)?;
    info!("{report:?}");
    table.write(&run.path("phenotypes.tsv"))?;
    run.finish(args, None, serde_json::to_value(&report)?)
}

/// Serialised single fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport<T> {
    pub method: String,
    pub component_names: Vec<String>,
    pub options: serde_json::Value,
    pub result: T,
}

fn reml_options(args: &FitArgs) -> Result<RemlOptions> {
    let o = RemlOptions {
        max_iter: args.max_iter,
        tol: args.tol,
        engine: match args.engine {
            EngineArg::Auto => EngineChoice::Auto,
            EngineArg::Dense => EngineChoice::Dense,
            EngineArg::Lowrank => EngineChoice::LowRank,
        },
        ..RemlOptions::default()
    };
    o.validate()?;
    Ok(o)
}

/// Wide table: one row per parameter, estimate and SE per partition, then each combiner.
pub fn partition_table(fits: &[FitResult], combined: &[CombinedParameter]) -> Table {
    let m = fits.len();
    let mut header = vec!["parameter".to_string()];
    for k in 1..=m {
        header.push(format!("part{k}"));
        header.push(format!("part{k}_se"));
    }
    for h in ["method", "combined", "combined_se", "simple_avg", "simple_avg_se", "fixed_effect", "fixed_effect_se"] {
        header.push(h.into());
    }
    let mut t = Table { header, rows: vec![] };
    for c in combined {
        let mut row = vec![c.name.clone()];
        for k in 0..m {
            row.push(c.inputs.values[k].to_string());
            row.push(c.inputs.ses[k].to_string());
        }
        row.push(serde_json::to_value(c.primary.method).expect("enum").as_str().unwrap_or("").to_string());
        for comb in [&c.primary, &c.simple_average, &c.fixed_effect] {
            row.push(comb.combined.to_string());
            row.push(fmt_opt(comb.se));
        }
        t.push(row);
    }
    t
}

pub fn cmd_fit(args: &FitArgs) -> Result<()> {
    if args.partitions == 0 {
        return Err(Error::invalid("--partitions must be at least 1"));
    }
    if args.method == FitMethod::Rehe && args.partitions > 1 {
        return Err(Error::invalid("partitioned fits are only supported for aireml"));
    }
    if args.method == FitMethod::Aireml && args.bootstrap > 0 {
        return Err(Error::invalid("--bootstrap applies to rehe only"));
    }
    let grm_id = io::id_path(&args.grm);
    let mut run = Run::new("fit", &args.out_dir, &[&args.pheno, &args.grm, &grm_id])?;
    let table = io::read_phenotypes(&args.pheno)?;
    let data = table.data;
    let grm = align_grm(&data, &io::read_grm(&args.grm)?)?;
    let names: Vec<String> = COMPONENT_NAMES.iter().map(|s| s.to_string()).collect();
    let mut report = serde_json::json!({
        "subjects": data.n_subjects(),
        "records": data.total_records(),
        "dropped_missing": table.dropped,
    });
    match args.method {
        FitMethod::Aireml => {
            let opts = reml_options(args)?;
            let options = serde_json::to_value(opts)?;
            if args.partitions == 1 {
                let fit = ai_reml_fit(&data, &grm, &opts)?;
                report["converged"] = fit.converged.into();
                io::write_json(
                    &run.path("fit.json"),
                    &FitReport { method: "aireml".into(), component_names: names, options, result: fit },
                )?;
            } else {
                let plan =
                    partition_subjects(data.n_subjects(), args.partitions, derive_seed(args.seed, "partition", 0))?;
                let mut fits = Vec::with_capacity(args.partitions);
                for (k, group) in plan.groups().iter().enumerate() {
                    let part = data.subset(group)?;
                    let pgrm = align_grm(&part, &grm)?;
                    let fit = ai_reml_fit(&part, &pgrm, &opts)?;
                    info!("partition {}: {} subjects, converged {}", k + 1, part.n_subjects(), fit.converged);
                    fits.push(fit);
                }
                let combined = combine_fits(&fits, &MetaOptions::default())?;
                report["converged"] = fits.iter().all(|f| f.converged).into();
                io::write_json(
                    &run.path("partitions.json"),
                    &FitReport {
                        method: "aireml".into(),
                        component_names: names,
                        options,
                        result: serde_json::json!({ "plan": plan, "fits": fits }),
                    },
                )?;
                io::write_json(&run.path("combined.json"), &combined)?;
                partition_table(&fits, &combined).write(&run.path("combined.tsv"))?;
            }
        }
        FitMethod::Rehe => {
            let fit = rehe_fit(&data, &grm)?;
            if args.bootstrap > 0 {
                let boot =
                    parametric_bootstrap(&fit, &data, &grm, args.bootstrap, derive_seed(args.seed, "bootstrap", 0))?;
                report["bootstrap_failures"] = boot.failures.into();
                let mut t = Table::new(&["parameter", "estimate", "emp_se", "mad", "ci_lo", "ci_hi"]);
                for p in &boot.parameters {
                    let ci = p.ci(CiMethod::Percentile);
                    t.push(vec![
                        p.name.clone(),
                        fmt_opt(p.estimate),
                        fmt_opt(p.emp_se),
                        fmt_opt(p.mad),
                        fmt_opt(ci.map(|c| c.0)),
                        fmt_opt(ci.map(|c| c.1)),
                    ]);
                }
                t.write(&run.path("bootstrap.tsv"))?;
                io::write_json(&run.path("bootstrap.json"), &boot)?;
            }
            io::write_json(
                &run.path("fit.json"),
                &FitReport {
                    method: "rehe".into(),
                    component_names: names,
                    options: serde_json::Value::Null,
                    result: fit,
                },
            )?;
        }
    }
    run.finish(args, Some(args.seed), report)
}

fn read_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let config: ScenarioConfig =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let config = read_config(&args.config)?;
    let mut run = Run::new("simulate", &args.out_dir, &[&args.config])?;
    let sim = simulate_scenario(&config, args.replicate)?;
    io::write_genotypes_binary(&run.path("genotypes.lgh"), &sim.genotypes)?;
    run.outputs.push("genotypes.lgh.id".into());
    io::write_allele_freqs(&run.path("allele_freqs.tsv"), sim.genotypes.variant_ids(), sim.genotypes.allele_freqs())?;
    io::write_phenotypes(&run.path("phenotypes.tsv"), &sim.data)?;
    io::write_grm(&run.path("grm.bin"), &sim.grm)?;
    run.outputs.push("grm.bin.id".into());
    io::write_json(&run.path("truth.json"), &sim.truth)?;
    let report = serde_json::json!({ "subjects": sim.data.n_subjects(), "records": sim.data.total_records() });
    run.finish(args, Some(config.seed), report)
}

pub fn summary_table(s: &ExperimentSummary) -> Table {
    let mut t = Table::new(&[
        "parameter",
        "scenario",
        "method",
        "truth",
        "mean",
        "median",
        "se",
        "emp_se",
        "mad",
        "n_ok",
        "n_failed",
        "n_unconverged",
    ]);
    for r in &s.rows {
        t.push(vec![
            r.parameter.clone(),
            r.scenario.clone(),
            r.method.clone(),
            fmt_opt(r.truth),
            fmt_opt(r.mean),
            fmt_opt(r.median),
            fmt_opt(r.se),
            fmt_opt(r.emp_se),
            fmt_opt(r.mad),
            r.n_ok.to_string(),
            r.n_failed.to_string(),
            r.n_unconverged.to_string(),
        ]);
    }
    t
}

pub fn replicate_table(s: &ExperimentSummary) -> Table {
    let mut t = Table::new(&["replicate", "method", "parameter", "estimate", "se", "converged", "error"]);
    for r in &s.replicates {
        for m in &r.methods {
            for (p, name) in PARAMETER_NAMES.iter().enumerate() {
                t.push(vec![
                    r.replicate.to_string(),
                    m.method.clone(),
                    name.to_string(),
                    fmt_opt(m.estimates.and_then(|e| e[p])),
                    fmt_opt(m.ses[p]),
                    m.converged.to_string(),
                    m.error.clone().unwrap_or_else(|| "NA".into()).replace(['\t', '\n'], " "),
                ]);
            }
        }
    }
    t
}

pub fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let config = read_config(&args.config)?;
    let mut run = Run::new("experiment", &args.out_dir, &[&args.config])?;
    let summary = run_experiment(&config)?;
    summary_table(&summary).write(&run.path("summary.tsv"))?;
    replicate_table(&summary).write(&run.path("replicates.tsv"))?;
    let failed: usize = summary.replicates.iter().flat_map(|r| &r.methods).filter(|m| m.estimates.is_none()).count();
    run.finish(args, Some(config.seed), serde_json::json!({ "replicates": config.reps, "failed_fits": failed }))
}

pub fn parse_regime(s: &str) -> Option<Regime> {
    match s {
        "variance" | "left" | "left_at_zero" => Some(Regime::LeftAtZero),
        "proportion" | "unit" | "unit_interval" => Some(Regime::UnitInterval),
        _ => None,
    }
}

/// Groups rows by parameter (first-appearance order) and combines each group.
pub fn meta_combine_table(table: &Table, zero_threshold: f64, lambda_tol: f64) -> Result<Vec<CombinedParameter>> {
    let col = |n: &str| table.column(n).ok_or_else(|| Error::invalid(format!("estimates table lacks a {n:?} column")));
    let (pc, ec, sc, rc) = (col("parameter")?, col("estimate")?, col("se")?, col("regime")?);
    let mut groups: Vec<(String, Regime, Vec<f64>, Vec<f64>)> = Vec::new();
    for (k, r) in table.rows.iter().enumerate() {
        let num = |c: usize, what: &str| {
            r[c].parse::<f64>()
                .map_err(|_| Error::invalid(format!("data row {}: cannot parse {what} {:?}", k + 1, r[c])))
        };
        let regime = parse_regime(&r[rc])
            .ok_or_else(|| Error::invalid(format!("data row {}: unknown regime {:?}", k + 1, r[rc])))?;
        let (x, s) = (num(ec, "estimate")?, num(sc, "se")?);
        match groups.iter_mut().find(|g| g.0 == r[pc]) {
            Some(g) if g.1 != regime => {
                return Err(Error::invalid(format!("data row {}: parameter {:?} changes regime", k + 1, r[pc])));
            }
            Some(g) => {
                g.2.push(x);
                g.3.push(s);
            }
            None => groups.push((r[pc].clone(), regime, vec![x], vec![s])),
        }
    }
    groups
        .into_iter()
        .map(|(name, regime, values, ses)| {
            let threshold = match regime {
                Regime::LeftAtZero => zero_threshold,
                Regime::UnitInterval => lambda_tol,
            };
            let zero = vec![threshold; values.len()];
            combine_estimates(PartitionEstimates::classify(name, regime, values, ses, &zero, lambda_tol)?)
        })
        .collect()
}

pub fn cmd_meta_combine(args: &MetaCombineArgs) -> Result<()> {
    let mut run = Run::new("meta-combine", &args.out_dir, &[&args.input])?;
    let combined = meta_combine_table(&Table::read(&args.input)?, args.zero_threshold, args.lambda_tol)?;
    let mut t = Table::new(&[
        "parameter",
        "method",
        "combined",
        "se",
        "unbounded",
        "simple_avg",
        "simple_avg_se",
        "fixed_effect",
        "fixed_effect_se",
    ]);
    for c in &combined {
        t.push(vec![
            c.name.clone(),
            serde_json::to_value(c.primary.method)?.as_str().unwrap_or("").to_string(),
            c.primary.combined.to_string(),
            fmt_opt(c.primary.se),
            c.primary.unbounded.to_string(),
            c.simple_average.combined.to_string(),
            fmt_opt(c.simple_average.se),
            c.fixed_effect.combined.to_string(),
            fmt_opt(c.fixed_effect.se),
        ]);
    }
    t.write(&run.path("combined.tsv"))?;
    io::write_json(&run.path("combined.json"), &combined)?;
    run.finish(args, None, serde_json::json!({ "parameters": combined.len() }))
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match std::env::var("LGH_THREADS") {
        Ok(v) => {
            v.trim().parse().map(Some).map_err(|_| Error::invalid(format!("LGH_THREADS={v:?} is not a thread count")))
        }
        Err(_) => Ok(None),
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_INPUT
    }
}

/// Dispatches a parsed command line; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = thread_count(cli.threads).and_then(|threads| {
        if let Some(n) = threads {
            if n == 0 {
                return Err(Error::invalid("--threads must be at least 1"));
            }
            // Fails only if a pool already exists, in which case that pool is used.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
        match &cli.command {
            Command::Grm(a) => cmd_grm(a),
            Command::Preprocess(a) => cmd_preprocess(a),
            Command::Fit(a) => cmd_fit(a),
            Command::Simulate(a) => cmd_simulate(a),
            Command::Experiment(a) => cmd_experiment(a),
            Command::MetaCombine(a) => cmd_meta_combine(a),
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
