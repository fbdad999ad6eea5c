//! Tracks the ProMP mean with and without the identified friction fed
//! forward.

use exosim::experiments::protocol::{fit_promp, initial_demos};
use exosim::experiments::{run_friction_identification, run_tracking_comparison, ScenarioConfig};

fn main() -> exosim::Result<()> {
    let config = ScenarioConfig::default();
    let promp = fit_promp(&config, &initial_demos(&config)?)?;
    let (friction, _) = run_friction_identification(&config, Some(&promp), &config.friction)?;
    let (report, _, _) = run_tracking_comparison(&config, &promp, &friction.psi_vector())?;
    for (label, m) in [("with compensation", &report.with_compensation), ("without compensation", &report.without_compensation)] {
        println!("{label:>21}: RMSE per joint {:.5?} rad, x100 {:.4}", m.rmse_per_joint, m.rmse_scaled);
    }
    println!("error ratio {:.3}", report.error_ratio);
    Ok(())
}
