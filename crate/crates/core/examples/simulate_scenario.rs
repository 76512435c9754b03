//! Draw one dataset from a scenario preset and check it against the retained truth record.

use lgh::sim::{simulate_scenario, Scenario, ScenarioConfig};
use lgh::stats;

fn main() -> lgh::Result<()> {
    let config = ScenarioConfig::desk(Scenario::I, 2024);
    let sim = simulate_scenario(&config, 0)?;
    println!(
        "{} subjects, {} records, {} causal variants",
        sim.data.n_subjects(),
        sim.data.total_records(),
        sim.truth.causal.len()
    );
    let times = sim.data.times();
    println!(
        "time range [{:.3}, {:.3}]",
        times.iter().copied().fold(f64::INFINITY, f64::min),
        times.iter().copied().fold(0.0, f64::max)
    );
    let var_g = stats::variance(&sim.truth.g).unwrap_or(f64::NAN);
    println!(
        "Var(g) = {:.3}, expected sigma2_g * mean(G_ii) = {:.3}",
        var_g,
        config.theta.sigma2_g * sim.grm.diag_mean()
    );
    let first = &sim.data.subjects()[0];
    println!("subject {}: times {:?}", first.id, first.times);
    println!("           y     {:?}", first.phenotypes);
    Ok(())
}
