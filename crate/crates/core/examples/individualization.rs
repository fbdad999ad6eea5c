//! Runs assistance sessions against the impaired wearer until every joint
//! tracks within two degrees, printing the metrics of each session.

use exosim::experiments::{run_individualization, Pipeline, ScenarioConfig, SeedSummary};

fn main() -> exosim::Result<()> {
    let config = ScenarioConfig::default();
    let pipeline = Pipeline::prepare(&config)?;
    let run = run_individualization(&config, &pipeline, &config.impairment)?;
    println!("{:>7}  {:>26}  {:>8}  {:>7}", "session", "RMSE per joint (rad)", "|tau_e|", "mean w");
    for s in &run.sessions {
        let m = &s.metrics;
        let rmse: Vec<String> = m.rmse_per_joint.iter().map(|r| format!("{r:.4}")).collect();
        println!("{:>7}  {:>26}  {:>8.3}  {:>7.3}", m.session, rmse.join(" "), m.mean_abs_interaction_torque, m.mean_weighting);
    }
    let summary = SeedSummary::from_run(config.seed, &run, &pipeline.friction)?;
    println!(
        "converged {}, improved on all metrics {}, elbow range kept {:.1}%",
        run.converged,
        summary.improved(),
        100.0 * summary.elbow_range_ratio
    );
    Ok(())
}
