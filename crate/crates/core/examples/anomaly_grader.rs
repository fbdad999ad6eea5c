//! Trains the anomaly grader on healthy demonstrations and scores a healthy
//! window against the same window pushed past the elbow's healthy range.

use exosim::experiments::protocol::{initial_demos, train_grader};
use exosim::experiments::{synth_demos, ScenarioConfig};
use exosim::grader::make_windows;

fn main() -> exosim::Result<()> {
    let config = ScenarioConfig::default();
    let demos = initial_demos(&config)?;
    let net = train_grader(&config, &demos)?;
    println!("calibrated kappa {:.4}, safe threshold {}", net.kappa, net.threshold);

    let fresh = synth_demos(99, 1, 1, &config.task, &config.synth, &config.robot, &config.friction)?;
    let windows = make_windows(&fresh[0], &config.grader.net)?;
    let n = config.n_joints();
    let elbow = n - 1;
    for offset in [0.0, 0.05, 0.1, 0.2, 0.4] {
        let mean: f64 = windows
            .iter()
            .map(|w| {
                let mut x = w.clone();
                for r in 0..config.grader.net.window {
                    x[2 * n * r + elbow] += offset;
                }
                net.score(&x)
            })
            .sum::<exosim::Result<f64>>()?
            / windows.len() as f64;
        println!("elbow offset {offset:.2} rad: mean score {mean:.3}");
    }
    let g = net.score_gradient(&windows[windows.len() / 2])?;
    println!("score gradient at mid-motion: ds/dq {:.3?}", g.ds_dq.as_slice());
    Ok(())
}
