//! Fit the longitudinal model by AI-REML on one simulated dataset and report heritabilities.

use lgh::sim::{simulate_scenario, Scenario, ScenarioConfig};
use lgh::{ai_reml_fit, RemlOptions};

fn main() -> lgh::Result<()> {
    let config =
        ScenarioConfig { n_subjects: 400, n_variants: 400, n_causal: 400, ..ScenarioConfig::desk(Scenario::I, 1) };
    let sim = simulate_scenario(&config, 0)?;
    let fit = ai_reml_fit(&sim.data, &sim.grm, &RemlOptions::default())?;

    println!("engine {}, converged {} after {} iterations", fit.engine, fit.converged, fit.iterations);
    let se = fit.se_theta.unwrap_or([f64::NAN; 5]);
    for (k, name) in lgh::model::COMPONENT_NAMES.iter().enumerate() {
        println!("{name:>13} {:8.4} ({:.4})  truth {}", fit.theta_hat.to_array()[k], se[k], config.theta.to_array()[k]);
    }
    let [s1, s2] = fit.lambda_se();
    println!("      lambda1 {:8.4} ({:.4})", fit.xi_hat.lambda1.unwrap_or(f64::NAN), s1.unwrap_or(f64::NAN));
    println!("      lambda2 {:8.4} ({:.4})", fit.xi_hat.lambda2.unwrap_or(f64::NAN), s2.unwrap_or(f64::NAN));
    println!("loglik trace {:?}", fit.loglik_trace);
    Ok(())
}
