//! The full protocol over three seeds in parallel, summarized as session 1
//! against the final session.

use exosim::experiments::{run_study, ScenarioConfig};

fn main() -> exosim::Result<()> {
    let config = ScenarioConfig::default();
    let seeds: Vec<u64> = (0..3).map(|i| config.seed + i).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let report = run_study(&config, &seeds, workers)?;
    println!("{:>4}  {:>8}  {:>15}  {:>15}  {:>13}", "seed", "sessions", "RMSE x100", "|tau_e| (N m)", "mean w");
    for s in &report.seeds {
        println!(
            "{:>4}  {:>8}  {:>6.3} -> {:>5.3}  {:>6.3} -> {:>5.3}  {:>5.2} -> {:>4.2}",
            s.seed,
            s.sessions,
            s.first.rmse_scaled,
            s.last.rmse_scaled,
            s.first.mean_abs_interaction_torque,
            s.last.mean_abs_interaction_torque,
            s.first.mean_weighting,
            s.last.mean_weighting
        );
    }
    println!(
        "all converged {}, all improved {}, min elbow range ratio {:.3}",
        report.all_converged, report.all_improved, report.min_elbow_range_ratio
    );
    Ok(())
}
