//! Holds a pose against a wearer pulling toward a different pose and shows
//! how the anomaly score stiffens the interaction through w(s).

use exosim::control::{impedance_residual, Controller, ControllerGains, ImpedanceConfig, Setpoint, WeightingPreset};
use exosim::dynamics::{patient_torque, step, FrictionTruth, PatientModel, RobotParams, SampledTrajectory, SimState};
use nalgebra::{DMatrix, DVector};

fn main() -> exosim::Result<()> {
    let params = RobotParams::default();
    let hold = DVector::from_vec(vec![0.3, 0.2, 0.5]);
    let intent = [0.45, 0.1, 0.7];
    let patient = PatientModel {
        intent: SampledTrajectory { dt: 1.0, q: DMatrix::from_fn(2, 3, |_, j| intent[j]), q_dot: DMatrix::zeros(2, 3) },
        stiffness: vec![50.0; 3],
        damping: vec![2.0; 3],
        extra_damping: vec![0.0; 3],
        clamp_lo: vec![-3.0; 3],
        clamp_hi: vec![3.0; 3],
    };
    let impedance = ImpedanceConfig::with_preset(3, WeightingPreset::Sec5);
    let setpoint = Setpoint { q_d: hold.clone(), q_d_dot: DVector::zeros(3), q_d_ddot: DVector::zeros(3) };
    println!("{:>5}  {:>7}  {:>22}  {:>22}  {:>9}", "s", "w", "q (rad)", "tau_e (N m)", "residual");
    for s in [0.0, 2.0, 3.6, 5.0, 10.0] {
        let mut controller =
            Controller::new(params.clone(), impedance.clone(), ControllerGains::new(3), DVector::zeros(9))?;
        let mut state = SimState::gravity_balanced(hold.clone(), &params)?;
        let mut last = None;
        for _ in 0..4000 {
            let tau_e = patient_torque(&state, &patient, state.t);
            let out = controller.update(&state, &setpoint, s, 1e-3)?;
            let r = impedance_residual(&state.q, &state.q_dot, &hold, &setpoint.q_d_dot, &tau_e, out.w, &impedance);
            state = step(&state, &out.u, &tau_e, &FrictionTruth::zero(3), &params, 1e-3)?;
            last = Some((out.w, tau_e, r.norm()));
        }
        let (w, tau_e, residual) = last.expect("simulated");
        println!("{s:>5.1}  {w:>7.3}  {:>22}  {:>22}  {residual:>9.2e}", fmt(state.q.as_slice()), fmt(tau_e.as_slice()));
    }
    Ok(())
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}
