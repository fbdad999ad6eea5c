//! One receding-horizon planning step: the planner trades reference tracking
//! against the predicted anomaly score inside the joint and velocity box.

use exosim::grader::ScoreGradient;
use exosim::planner::{plan_step, MpcConfig, PlannerState};
use nalgebra::DVector;

fn main() -> exosim::Result<()> {
    let mut config = MpcConfig::new(vec![-0.5, -0.6, -0.2], vec![1.6, 1.2, 2.0]);
    config.q_diag[0] = 1.0;
    let x = PlannerState {
        s: 2.5,
        q_d: DVector::from_vec(vec![0.6, 0.3, 1.9]),
        q_d_dot: DVector::from_vec(vec![0.2, 0.0, 0.4]),
    };
    // reference keeps moving the elbow toward its upper limit
    let reference: Vec<DVector<f64>> = (1..=config.horizon)
        .map(|i| {
            let t = i as f64 * config.dt;
            DVector::from_vec(vec![0.0, 0.6 + 0.2 * t, 0.3, 1.9 + 0.4 * t, 0.2, 0.0, 0.4])
        })
        .collect();
    for ds_dq in [[0.0, 0.0, 0.0], [0.0, 0.0, 5.0]] {
        let grad = ScoreGradient { ds_dq: DVector::from_vec(ds_dq.to_vec()), ds_dtau: DVector::zeros(3) };
        let step = plan_step(&x, &reference, &grad, &config)?;
        println!("ds/dq {ds_dq:?}");
        println!("  accel {:.3?}", step.accel.as_slice());
        println!("  next q_d {:.4?}  q_d' {:.4?}", step.next.q_d.as_slice(), step.next.q_d_dot.as_slice());
        let d = &step.diagnostics;
        println!(
            "  cost {:.4e}, {} iterations, {} active bounds, predicted score {:.3}",
            d.cost, d.iterations, d.active_constraints, d.predicted_score
        );
    }
    Ok(())
}
