//! A small multi-replicate experiment comparing AI-REML, partitioned AI-REML and REHE.
//! Pass a replicate count as the first argument (default 20).

use lgh::cli::summary_table;
use lgh::sim::{run_experiment, MethodSpec, Scenario, ScenarioConfig};

fn main() -> lgh::Result<()> {
    let reps = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(20);
    let config = ScenarioConfig {
        reps,
        methods: vec![MethodSpec::Aireml, MethodSpec::AiremlPartition { partitions: 3 }, MethodSpec::Rehe],
        ..ScenarioConfig::desk(Scenario::II, 7)
    };
    let summary = run_experiment(&config)?;
    print!("{}", summary_table(&summary).to_tsv());
    Ok(())
}
