//! Partition a cohort, fit each part by AI-REML, and combine with the censored-likelihood
//! meta-analysis. Then combine a stored five-partition estimate table the same way.

use std::path::Path;

use lgh::cli::meta_combine_table;
use lgh::io::Table;
use lgh::meta::{combine_fits, partition_subjects, MetaOptions};
use lgh::model::align_grm;
use lgh::sim::{simulate_scenario, Scenario, ScenarioConfig};
use lgh::{ai_reml_fit, RemlOptions};

fn main() -> lgh::Result<()> {
    let config = ScenarioConfig { n_subjects: 500, ..ScenarioConfig::desk(Scenario::III, 5) };
    let sim = simulate_scenario(&config, 0)?;
    let plan = partition_subjects(sim.data.n_subjects(), 5, 123)?;
    let mut fits = Vec::new();
    for group in plan.groups() {
        let part = sim.data.subset(&group)?;
        fits.push(ai_reml_fit(&part, &align_grm(&part, &sim.grm)?, &RemlOptions::default())?);
    }
    println!("simulated cohort, 5 partitions:");
    for c in combine_fits(&fits, &MetaOptions::default())? {
        println!(
            "{:>13} {:?} {:.3} (se {:.3}); simple average {:.3}; censored inputs {}",
            c.name,
            c.primary.method,
            c.primary.combined,
            c.primary.se.unwrap_or(f64::NAN),
            c.simple_average.combined,
            c.inputs.n_censored()
        );
    }

    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/five_partition_estimates.tsv");
    println!("\nstored estimates from {}:", path.display());
    for c in meta_combine_table(&Table::read(&path)?, 0.0, lgh::meta::DEFAULT_LAMBDA_TOL)? {
        println!("{:>13} {:.3} ({:.3})", c.name, c.primary.combined, c.primary.se.unwrap_or(f64::NAN));
    }
    Ok(())
}
