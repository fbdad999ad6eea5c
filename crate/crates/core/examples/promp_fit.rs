//! Fits a ProMP to synthetic healthy demonstrations and prints the mean and
//! spread of each joint along the motion.

use exosim::experiments::protocol::{fit_promp, initial_demos};
use exosim::experiments::ScenarioConfig;
use exosim::promp::{mean_trajectory, sample_trajectory};

fn main() -> exosim::Result<()> {
    let config = ScenarioConfig::default();
    let demos = initial_demos(&config)?;
    let model = fit_promp(&config, &demos)?;
    println!("{} demonstrations, log-likelihood {:.2}", demos.len(), model.log_likelihood()?);

    let mean = mean_trajectory(&model, config.task.duration, config.task.dt);
    let samples = (0..200).map(|i| sample_trajectory(&model, i)).collect::<exosim::Result<Vec<_>>>()?;
    println!("{:>5}  {:>22}  {:>22}", "t", "mean q (rad)", "std q (rad)");
    for k in (0..mean.len()).step_by(50) {
        let std: Vec<f64> = (0..3)
            .map(|j| {
                let m = mean.q[(k, j)];
                (samples.iter().map(|s| (s.q[(k, j)] - m).powi(2)).sum::<f64>() / samples.len() as f64).sqrt()
            })
            .collect();
        let row: Vec<f64> = mean.q.row(k).iter().copied().collect();
        println!("{:>5.2}  {:>22}  {:>22}", k as f64 * mean.dt, fmt(&row), fmt(&std));
    }
    Ok(())
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}
