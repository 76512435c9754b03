use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lgh::cli::{FitReport, RunManifest};
use lgh::io::{read_json, Table};
use lgh::FitResult;

fn lgh(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lgh")).args(["--log-level", "warn", "--threads", "2"]).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = lgh(args);
    assert!(out.status.success(), "lgh {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn manifest(dir: &Path) -> RunManifest {
    read_json(&dir.join("manifest.json")).unwrap()
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/configs").join(name)
}

/// Simulates a small dataset once per test; returns the simulation directory.
fn simulated(root: &Path, n: usize) -> PathBuf {
    let cfg = root.join("cfg.json");
    let text = std::fs::read_to_string(config_path("quick.json"))
        .unwrap()
        .replace("\"n_subjects\": 60", &format!("\"n_subjects\": {n}"));
    std::fs::write(&cfg, text).unwrap();
    let dir = root.join("sim");
    ok(&["simulate", "--config", &s(&cfg), "--out-dir", &s(&dir)]);
    dir
}

#[test]
fn grm_fixture_matches_reference_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let geno = tmp.path().join("g.tsv");
    let af = tmp.path().join("af.tsv");
    std::fs::write(&geno, "subject_id\tv1\tv2\nA\t0\t2\nB\t1\t1\nC\t2\t0\n").unwrap();
    std::fs::write(&af, "variant_id\taf\nv1\t0.5\nv2\t0.25\n").unwrap();
    let out = tmp.path().join("out");
    ok(&["grm", "--geno", &s(&geno), "--af", &s(&af), "--out-dir", &s(&out), "--maf", "0.01"]);

    let x: [[f64; 2]; 3] = [[0.0, 2.0], [1.0, 1.0], [2.0, 0.0]];
    let p: [f64; 2] = [0.5, 0.25];
    let z = |i: usize, j: usize| (x[i][j] - 2.0 * p[j]) / (2.0 * p[j] * (1.0 - p[j])).sqrt();
    let mut reference = b"GRM1".to_vec();
    reference.extend(3u64.to_le_bytes());
    for i in 0..3 {
        for k in 0..=i {
            let g = (z(i, 0) * z(k, 0) + z(i, 1) * z(k, 1)) / 2.0;
            reference.extend(g.to_le_bytes());
        }
    }
    let written = std::fs::read(out.join("grm.bin")).unwrap();
    assert_eq!(written.len(), reference.len());
    for (a, b) in written[12..].chunks(8).zip(reference[12..].chunks(8)) {
        let (a, b) = (f64::from_le_bytes(a.try_into().unwrap()), f64::from_le_bytes(b.try_into().unwrap()));
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
    assert_eq!(written[..12], reference[..12]);
    assert_eq!(std::fs::read_to_string(out.join("grm.bin.id")).unwrap(), "A\nB\nC\n");
    let m = manifest(&out);
    assert_eq!(m.inputs.len(), 2);
    assert_eq!(m.inputs[0].sha256, lgh::io::file_digest(&geno).unwrap());

    // Only the variant at frequency exactly one half survives a 0.5 threshold.
    let out = tmp.path().join("maf");
    ok(&["grm", "--geno", &s(&geno), "--af", &s(&af), "--out-dir", &s(&out), "--maf", "0.5"]);
    let report = manifest(&out).report;
    assert_eq!(report["variants_used"], 1);
    assert_eq!(report["variants_removed_by_maf"], 1);

    let out = tmp.path().join("noaf");
    let res = ok(&["grm", "--geno", &s(&geno), "--out-dir", &s(&out)]);
    assert!(String::from_utf8_lossy(&res.stderr).contains("estimating"));
    assert_eq!(manifest(&out).report["allele_freqs_estimated"], true);
}

#[test]
fn preprocess_transforms() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("p.tsv");
    std::fs::write(&input, "subject_id\ttime\ty\nA\t54\t0\nA\t80\t1.5\nB\t60\tNA\n").unwrap();
    let out = tmp.path().join("o");
    ok(&["preprocess", "--pheno", &s(&input), "--log-transform", "--time-rescale", "plco", "--out-dir", &s(&out)]);
    let t = Table::read(&out.join("phenotypes.tsv")).unwrap();
    assert_eq!(t.rows.len(), 2);
    let v = |r: usize, c: usize| t.rows[r][c].parse::<f64>().unwrap();
    assert_eq!(v(0, 2), 0.005f64.ln());
    assert_eq!(v(0, 1), 0.0);
    assert!((v(1, 1) - 0.8667).abs() < 1e-4);
    let report = manifest(&out).report;
    assert_eq!(report["dropped_missing"], 1);
    assert_eq!(report["zeros_replaced"], 1);

    let clean = tmp.path().join("c.tsv");
    std::fs::write(&clean, "subject_id\ttime\ty\nA\t0.1\t-2\nB\t0.5\t3.25\n").unwrap();
    let out = tmp.path().join("copy");
    ok(&["preprocess", "--pheno", &s(&clean), "--out-dir", &s(&out)]);
    assert_eq!(std::fs::read(out.join("phenotypes.tsv")).unwrap(), std::fs::read(&clean).unwrap());

    let out = tmp.path().join("span");
    ok(&["preprocess", "--pheno", &s(&input), "--time-rescale", "span", "--span-range", "26", "--out-dir", &s(&out)]);
    let t = Table::read(&out.join("phenotypes.tsv")).unwrap();
    assert_eq!(t.rows[1][1].parse::<f64>().unwrap(), 1.0);

    let res = lgh(&["preprocess", "--pheno", &s(&clean), "--log-transform", "--out-dir", &s(&tmp.path().join("bad"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("[1]"));
}

#[test]
fn fit_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = simulated(tmp.path(), 50);
    let pheno = s(&sim.join("phenotypes.tsv"));
    let grm = s(&sim.join("grm.bin"));

    let single = tmp.path().join("single");
    ok(&["fit", "--pheno", &pheno, "--grm", &grm, "--out-dir", &s(&single)]);
    let report: FitReport<FitResult> = read_json(&single.join("fit.json")).unwrap();
    assert_eq!(report.method, "aireml");
    assert_eq!(report.result.theta_hat.to_array().len(), 5);
    // JSON round trip is exact.
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<FitReport<FitResult>>(&text).unwrap(), report);

    let parts = tmp.path().join("parts");
    ok(&["fit", "--pheno", &pheno, "--grm", &grm, "--partitions", "5", "--seed", "4", "--out-dir", &s(&parts)]);
    let t = Table::read(&parts.join("combined.tsv")).unwrap();
    assert_eq!(t.rows.len(), 7);
    assert!(t.column("part5_se").is_some() && t.column("combined").is_some() && t.column("fixed_effect").is_some());
    assert_eq!(manifest(&parts).seed, Some(4));

    let res = lgh(&[
        "fit",
        "--pheno",
        &pheno,
        "--grm",
        &grm,
        "--method",
        "rehe",
        "--partitions",
        "5",
        "--out-dir",
        &s(&tmp.path().join("x")),
    ]);
    assert_eq!(res.status.code(), Some(2));

    let boot = tmp.path().join("boot");
    ok(&["fit", "--pheno", &pheno, "--grm", &grm, "--method", "rehe", "--bootstrap", "100", "--out-dir", &s(&boot)]);
    let t = Table::read(&boot.join("bootstrap.tsv")).unwrap();
    assert_eq!(t.header, ["parameter", "estimate", "emp_se", "mad", "ci_lo", "ci_hi"]);
    assert_eq!(t.rows.len(), 7);

    let res = lgh(&[
        "fit",
        "--pheno",
        &pheno,
        "--grm",
        &s(&tmp.path().join("missing.bin")),
        "--out-dir",
        &s(&tmp.path().join("y")),
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn experiment_outputs_and_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("one.json");
    let text = std::fs::read_to_string(config_path("quick.json")).unwrap().replace("\"reps\": 5", "\"reps\": 1");
    std::fs::write(&cfg, text).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["experiment", "--config", &s(&cfg), "--out-dir", &s(&a)]);
    ok(&["experiment", "--config", &s(&cfg), "--out-dir", &s(&b)]);
    for f in ["summary.tsv", "replicates.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
    let t = Table::read(&a.join("summary.tsv")).unwrap();
    for h in ["parameter", "scenario", "method", "mean", "median", "se", "emp_se", "mad"] {
        assert!(t.column(h).is_some(), "missing column {h}");
    }
    let (es, mad) = (t.column("emp_se").unwrap(), t.column("mad").unwrap());
    assert!(t.rows.iter().all(|r| r[es] == "NA" && r[mad] == "NA"));

    std::fs::write(
        &cfg,
        r#"{"theta": {"sigma2_g":1,"sigma2_gstar":1,"sigma2_b0":1,"sigma2_b1":1,"sigma2_e":1},
        "n_subjects": 10, "visits": 3, "n_variants": 5, "n_causal": 20, "seed": 1, "reps": 2}"#,
    )
    .unwrap();
    let res = lgh(&["experiment", "--config", &s(&cfg), "--out-dir", &s(&tmp.path().join("bad"))]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("n_causal"));
}

#[test]
fn meta_combine_on_stored_estimates() {
    let tmp = tempfile::tempdir().unwrap();
    let input = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/five_partition_estimates.tsv");
    ok(&["meta-combine", "--input", &s(&input), "--out-dir", &s(tmp.path())]);
    let t = Table::read(&tmp.path().join("combined.tsv")).unwrap();
    let row = t.rows.iter().find(|r| r[0] == "lambda1").unwrap();
    assert_eq!(row[1], "double_trunc");
    assert!((row[2].parse::<f64>().unwrap() - 0.32).abs() < 0.02);

    let bad = tmp.path().join("bad.tsv");
    std::fs::write(&bad, "parameter\testimate\tse\tregime\nx\t0.1\t0.1\tsideways\n").unwrap();
    assert_eq!(lgh(&["meta-combine", "--input", &s(&bad), "--out-dir", &s(tmp.path())]).status.code(), Some(2));
}

#[test]
fn thread_env_fallback_and_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lgh"))
        .env("LGH_THREADS", "3")
        .args(["meta-combine", "--input"])
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/five_partition_estimates.tsv"))
        .arg("--out-dir")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(manifest(tmp.path()).timing.threads, 3);
    assert_eq!(lgh(&["fit"]).status.code(), Some(2));
}

#[test]
fn exit_code_mapping() {
    use lgh::cli::{exit_code, EXIT_INPUT, EXIT_NUMERICAL};
    assert_eq!(exit_code(&lgh::Error::Numerical("x".into())), EXIT_NUMERICAL);
    assert_eq!(exit_code(&lgh::Error::NotPositiveDefinite { pivot: Some(2) }), EXIT_NUMERICAL);
    assert_eq!(exit_code(&lgh::Error::Invalid("x".into())), EXIT_INPUT);
}
