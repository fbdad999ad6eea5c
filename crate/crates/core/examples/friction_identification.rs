//! Identifies the joint friction on a persistently exciting motion and
//! prints the coefficient table next to the ground truth.

use exosim::experiments::{run_friction_identification, ScenarioConfig};

fn main() -> exosim::Result<()> {
    let config = ScenarioConfig::default();
    let (report, log) = run_friction_identification(&config, None, &config.friction)?;
    println!("{} logged samples over {} s", log.rows.len(), config.identification.duration);
    println!("joint  {:>8} {:>8} {:>8}", "a", "b", "c");
    for (j, row) in report.table.iter().enumerate() {
        println!("{j:>5}  {:>8.4} {:>8.4} {:>8.4}", row[0], row[1], row[2]);
    }
    let t = &config.friction;
    println!("ground-truth Stribeck model: a {:?}, b {:?}, c {:?}, d {:?}", t.a, t.b, t.c, t.d);
    println!("relative torque error over the last {} s: {:.4}", config.identification.score_window, report.relative_error);
    Ok(())
}
