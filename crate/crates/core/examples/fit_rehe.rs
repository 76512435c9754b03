//! REHE fit with a parametric bootstrap for standard errors and percentile intervals.

use lgh::rehe::CiMethod;
use lgh::sim::{simulate_scenario, Scenario, ScenarioConfig};
use lgh::{parametric_bootstrap, rehe_fit};

fn main() -> lgh::Result<()> {
    let config = ScenarioConfig { n_subjects: 300, ..ScenarioConfig::desk(Scenario::II, 3) };
    let sim = simulate_scenario(&config, 0)?;
    let fit = rehe_fit(&sim.data, &sim.grm)?;
    println!("clamped components: {:?}", fit.clamped);

    let boot = parametric_bootstrap(&fit, &sim.data, &sim.grm, 200, 17)?;
    println!("{} replicates, {} failed", boot.replicates, boot.failures);
    println!("{:>13} {:>9} {:>9} {:>9} {:>19}", "parameter", "estimate", "emp_se", "mad", "95% interval");
    for p in &boot.parameters {
        let ci = p.ci(CiMethod::Percentile).map_or("NA".into(), |(a, b)| format!("[{a:.3}, {b:.3}]"));
        let f = |x: Option<f64>| x.map_or("NA".to_string(), |v| format!("{v:.4}"));
        println!("{:>13} {:>9} {:>9} {:>9} {:>19}", p.name, f(p.estimate), f(p.emp_se), f(p.mad), ci);
    }
    Ok(())
}
