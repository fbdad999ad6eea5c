use exosim::control::*;
use exosim::dynamics::*;
use exosim::experiments::{run_friction_identification, ScenarioConfig};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

#[test]
fn fig5_preset_values() {
    let c = ImpedanceConfig::with_preset(3, WeightingPreset::Fig5);
    assert_eq!(weighting(4.0, &c), 5.5);
    let w0 = weighting(0.0, &c);
    let w8 = weighting(8.0, &c);
    assert!((0.99..=1.01).contains(&w0), "{w0}");
    assert!((9.99..=10.01).contains(&w8), "{w8}");
}

#[test]
fn sec5_preset_midpoint() {
    let c = ImpedanceConfig::with_preset(3, WeightingPreset::Sec5);
    assert_eq!(weighting(3.6, &c), 10.5);
}

#[test]
fn presets_are_monotone_on_the_score_range() {
    for preset in [WeightingPreset::Fig5, WeightingPreset::Sec5] {
        let c = ImpedanceConfig::with_preset(3, preset);
        let mut prev = weighting(0.0, &c);
        for k in 1..=10_000 {
            let w = weighting(k as f64 * 1e-3, &c);
            assert!(w >= prev, "{preset:?} decreases at s = {}", k as f64 * 1e-3);
            prev = w;
        }
    }
}

#[test]
fn preset_names_parse() {
    assert_eq!(WeightingPreset::parse("fig5").unwrap(), WeightingPreset::Fig5);
    assert_eq!(WeightingPreset::parse("sec5").unwrap(), WeightingPreset::Sec5);
    assert!(WeightingPreset::parse("fig6").is_err());
}

#[test]
fn weighting_that_reaches_zero_is_rejected() {
    let mut c = ImpedanceConfig::with_preset(3, WeightingPreset::Fig5);
    c.lambda2 = 4.0;
    assert!(c.validate(3).is_err());
}

proptest! {
    #[test]
    fn impedance_vector_vanishes_on_the_target_relation(
        q in prop::collection::vec(-1.0f64..1.0, 3),
        q_d in prop::collection::vec(-1.0f64..1.0, 3),
        q_d_dot in prop::collection::vec(-1.0f64..1.0, 3),
        tau in prop::collection::vec(-5.0f64..5.0, 3),
        s in 0.0f64..10.0,
    ) {
        let c = ImpedanceConfig::with_preset(3, WeightingPreset::Sec5);
        let w = weighting(s, &c);
        let (q, q_d, q_d_dot, tau) = (v(&q), v(&q_d), v(&q_d_dot), v(&tau));
        let q_dot = reference_velocity(&q, &q_d, &q_d_dot, &tau, w, &c);
        prop_assert!(impedance_vector(&q, &q_dot, &q_d, &q_d_dot, &tau, w, &c).norm() < 1e-12);
        prop_assert!(impedance_residual(&q, &q_dot, &q_d, &q_d_dot, &tau, w, &c).norm() < 1e-10);
    }

    #[test]
    fn adaptation_is_idle_on_perfect_tracking(
        q in prop::collection::vec(-1.0f64..1.0, 3),
        q_dot in prop::collection::vec(-2.0f64..2.0, 3),
        psi in prop::collection::vec(-1.0f64..1.0, 9),
    ) {
        let psi = v(&psi);
        let next = adapt_step(&psi, &v(&q), &v(&q_dot), &v(&q), &v(&q_dot), &AdaptationConfig::default(), 1e-3);
        prop_assert_eq!(next, psi);
    }

    #[test]
    fn friction_estimate_is_odd(q_dot in prop::collection::vec(-2.0f64..2.0, 3), psi in prop::collection::vec(-1.0f64..1.0, 9)) {
        let psi = v(&psi);
        let qd = v(&q_dot);
        let a = friction_estimate_torque(&psi, &qd);
        let b = friction_estimate_torque(&psi, &(-&qd));
        prop_assert!((a + b).norm() < 1e-12);
    }
}

#[test]
fn adaptation_moves_along_the_regressor() {
    let cfg = AdaptationConfig { gamma: [1.0, 0.5, 0.5], alpha: 10.0, dead_zone: 0.0 };
    let q_dot = v(&[1.0, 0.0, 0.0]);
    let next = adapt_step(&DVector::zeros(9), &v(&[0.01, 0.0, 0.0]), &q_dot, &DVector::zeros(3), &q_dot, &cfg, 0.1);
    // sliding variable is 0.1 on joint 0, regressor row [1, 1, 1]
    let expected = [0.01, 0.005, 0.005, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for (a, b) in next.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
}

fn hold_still(stiffness: f64) -> PatientModel {
    let target = [0.4, 0.1, 0.6];
    let intent = SampledTrajectory { dt: 1.0, q: DMatrix::from_fn(2, 3, |_, j| target[j]), q_dot: DMatrix::zeros(2, 3) };
    PatientModel {
        intent,
        stiffness: vec![stiffness; 3],
        damping: vec![2.0; 3],
        extra_damping: vec![0.0; 3],
        clamp_lo: vec![-3.0; 3],
        clamp_hi: vec![3.0; 3],
    }
}

struct Run {
    residual: f64,
    observer_error: f64,
}

fn closed_loop(patient: &PatientModel, s: f64, seconds: f64) -> Run {
    let p = RobotParams::default();
    let q0 = v(&[0.3, 0.2, 0.5]);
    let imp = ImpedanceConfig::with_preset(3, WeightingPreset::Sec5);
    assert_eq!((imp.c_d[0], imp.k_d[0]), (30.0, 50.0));
    let mut c = Controller::new(p.clone(), imp.clone(), ControllerGains::new(3), DVector::zeros(9)).unwrap();
    let truth = FrictionTruth::zero(3);
    let mut state = SimState::gravity_balanced(q0.clone(), &p).unwrap();
    let sp = Setpoint { q_d: q0, q_d_dot: DVector::zeros(3), q_d_ddot: DVector::zeros(3) };
    let dt = 1e-3;
    let mut run = Run { residual: 0.0, observer_error: 0.0 };
    for _ in 0..(seconds / dt).round() as usize {
        let tau_e = patient_torque(&state, patient, state.t);
        let out = c.update(&state, &sp, s, dt).unwrap();
        run.residual = impedance_residual(&state.q, &state.q_dot, &sp.q_d, &sp.q_d_dot, &tau_e, out.w, &imp).norm();
        run.observer_error = (&out.tau_e_hat - &tau_e).norm();
        state = step(&state, &out.u, &tau_e, &truth, &p, dt).unwrap();
    }
    run
}

#[test]
fn impedance_relation_holds_at_steady_state() {
    for (stiffness, s) in [(50.0, 0.0), (50.0, 3.6), (20.0, 10.0)] {
        let run = closed_loop(&hold_still(stiffness), s, 5.0);
        assert!(run.residual < 0.05, "stiffness {stiffness}, s {s}: residual {}", run.residual);
        assert!(run.observer_error < 0.05, "observer error {}", run.observer_error);
    }
}

#[test]
fn observer_tracks_a_step_in_contact_torque() {
    let p = RobotParams::default();
    let q = v(&[0.3, 0.2, 0.5]);
    let mut obs = MomentumObserver::new(3);
    let k_o = [20.0; 3];
    let tau_e = v(&[1.0, -0.5, 0.25]);
    let state = SimState::gravity_balanced(q.clone(), &p).unwrap();
    let mut s = state.clone();
    let dt = 1e-4;
    let mut r = DVector::zeros(3);
    for _ in 0..(0.05 / dt) as usize {
        r = obs.step(&s.q, &s.q_dot, &sea_torque(&s.theta, &s.q, &p), &DVector::zeros(3), &p, &k_o, dt).unwrap();
        s = step(&s, &DVector::zeros(3), &tau_e, &FrictionTruth::zero(3), &p, dt).unwrap();
        s.theta = s.q.clone() + (&state.theta - &state.q);
        s.theta_dot = s.q_dot.clone();
    }
    // first-order lag with time constant 1 / K_O
    let expected = 1.0 - (-20.0f64 * 0.05).exp();
    for j in 0..3 {
        assert!((r[j] / tau_e[j] - expected).abs() < 0.02, "joint {j}: {} vs {expected}", r[j] / tau_e[j]);
    }
}

#[test]
fn free_motion_gives_no_contact_estimate() {
    let p = RobotParams::default();
    let mut s = SimState::gravity_balanced(v(&[0.2, 0.4, 0.3]), &p).unwrap();
    s.q_dot = v(&[0.5, -0.3, 0.2]);
    s.theta_dot = s.q_dot.clone();
    let mut obs = MomentumObserver::new(3);
    let dt = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let tau_o = sea_torque(&s.theta, &s.q, &p);
        let r = obs.step(&s.q, &s.q_dot, &tau_o, &DVector::zeros(3), &p, &[20.0; 3], dt).unwrap();
        worst = worst.max(r.amax());
        s = step(&s, &DVector::zeros(3), &DVector::zeros(3), &FrictionTruth::zero(3), &p, dt).unwrap();
    }
    assert!(worst < 0.05, "{worst}");
}

#[test]
fn identification_without_friction_stays_near_zero() {
    let config = ScenarioConfig::default();
    let (report, log) = run_friction_identification(&config, None, &FrictionTruth::zero(3)).unwrap();
    assert!(report.psi_norm < 1e-2, "{}", report.psi_norm);
    assert_eq!(report.table.len(), 3);
    assert!(!log.rows.is_empty());
}

#[test]
fn identification_recovers_the_disturbance() {
    let config = ScenarioConfig::default();
    let (report, _) = run_friction_identification(&config, None, &config.friction).unwrap();
    assert!(report.relative_error < 0.05, "{}", report.relative_error);
    let recovered = friction_estimate_torque(&report.psi_vector(), &v(&[0.5, -0.5, 0.5]));
    let truth = disturbance_torque(&v(&[0.5, -0.5, 0.5]), &config.friction);
    assert!((recovered - &truth).norm() < 0.2 * truth.norm());
}
