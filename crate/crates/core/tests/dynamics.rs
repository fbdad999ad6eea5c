use exosim::dynamics::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

/// COM positions and link angles from first principles, independent of the
/// Jacobian code under test.
fn link_poses(q: &DVector<f64>, p: &RobotParams) -> Vec<(f64, f64, f64)> {
    let mut base = (0.0, 0.0);
    let mut phi = 0.0;
    let mut out = Vec::new();
    for i in 0..q.len() {
        phi += q[i];
        let c = p.link_com_offsets[i];
        out.push((base.0 + c * phi.sin(), base.1 - c * phi.cos(), phi));
        base = (base.0 + p.link_lengths[i] * phi.sin(), base.1 - p.link_lengths[i] * phi.cos());
    }
    out
}

/// Sum of per-link translational and rotational kinetic energy, with COM
/// velocities from central differences of the forward kinematics.
fn kinetic_energy_oracle(q: &DVector<f64>, qd: &DVector<f64>, p: &RobotParams) -> f64 {
    let h = 1e-6;
    let plus = link_poses(&(q + qd * h), p);
    let minus = link_poses(&(q - qd * h), p);
    let mut ke = 0.0;
    for i in 0..q.len() {
        let vx = (plus[i].0 - minus[i].0) / (2.0 * h);
        let vy = (plus[i].1 - minus[i].1) / (2.0 * h);
        let w = (plus[i].2 - minus[i].2) / (2.0 * h);
        ke += 0.5 * p.link_masses[i] * (vx * vx + vy * vy) + 0.5 * p.link_inertias[i] * w * w;
    }
    ke
}

#[test]
fn inertia_matches_per_link_kinetic_energy() {
    let p = RobotParams::default();
    let q = v(&[0.3, -0.4, 0.7]);
    let terms = dynamics_terms(&q, &DVector::zeros(3), &p).unwrap();
    let eig = terms.mass.clone().symmetric_eigen();
    assert!(eig.eigenvalues.min() > 0.0);
    assert!((&terms.mass - terms.mass.transpose()).norm() < 1e-14);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let qd = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
        let ke = 0.5 * qd.dot(&(&terms.mass * &qd));
        let oracle = kinetic_energy_oracle(&q, &qd, &p);
        assert!((ke - oracle).abs() < 1e-8 * oracle.max(1.0), "{ke} vs {oracle}");
    }
}

fn skew_residual(q: &DVector<f64>, qd: &DVector<f64>, dir: &DVector<f64>, p: &RobotParams) -> f64 {
    let h = 1e-6;
    let mp = dynamics_terms(&(q + qd * h), qd, p).unwrap().mass;
    let mm = dynamics_terms(&(q - qd * h), qd, p).unwrap().mass;
    let m_dot = (mp - mm) / (2.0 * h);
    let c = dynamics_terms(q, qd, p).unwrap().coriolis;
    dir.dot(&((m_dot - c * 2.0) * dir))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mdot_minus_2c_is_skew(
        q in prop::collection::vec(-3.0f64..3.0, 3),
        qd in prop::collection::vec(-2.0f64..2.0, 3),
        dir in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let p = RobotParams::default();
        let r = skew_residual(&v(&q), &v(&qd), &v(&dir), &p);
        prop_assert!(r.abs() < 1e-8, "residual {}", r);
    }

    #[test]
    fn mass_matrix_positive_definite(q in prop::collection::vec(-3.2f64..3.2, 3)) {
        let p = RobotParams::default();
        let m = dynamics_terms(&v(&q), &DVector::zeros(3), &p).unwrap().mass;
        prop_assert!(m.symmetric_eigen().eigenvalues.min() > 0.0);
    }

    #[test]
    fn friction_is_odd(qd in prop::collection::vec(-2.0f64..2.0, 3)) {
        let truth = FrictionTruth::default();
        let f = friction_true(&v(&qd), &truth) + friction_true(&(-v(&qd)), &truth);
        prop_assert!(f.amax() < 1e-12);
    }

    #[test]
    fn sea_torque_is_antisymmetric_and_linear(
        a in prop::collection::vec(-1.0f64..1.0, 3),
        b in prop::collection::vec(-1.0f64..1.0, 3),
    ) {
        let p = RobotParams::default();
        let (a, b) = (v(&a), v(&b));
        prop_assert!((sea_torque(&a, &b, &p) + sea_torque(&b, &a, &p)).amax() < 1e-12);
        let doubled = sea_torque(&(&a * 2.0), &(&b * 2.0), &p);
        prop_assert!((doubled - sea_torque(&a, &b, &p) * 2.0).amax() < 1e-12);
    }
}

#[test]
fn stribeck_scalar_value() {
    let truth = FrictionTruth { a: vec![1.0], b: vec![0.5], c: vec![2.0], d: vec![0.1] };
    let f = friction_true(&v(&[0.5]), &truth)[0];
    let expected = 1.0 + 0.5 * (-1.0f64).exp() + 0.05;
    assert!((f - expected).abs() < 1e-15);
}

#[test]
fn impaired_damping_adds_torque() {
    let intent = SampledTrajectory {
        dt: 0.01,
        q: DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 0.0]),
        q_dot: DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 0.0]),
    };
    let healthy = PatientModel {
        intent,
        stiffness: vec![40.0],
        damping: vec![2.0],
        extra_damping: vec![0.0],
        clamp_lo: vec![-1.0],
        clamp_hi: vec![1.0],
    };
    let impaired = PatientModel { extra_damping: vec![10.0], ..healthy.clone() };
    let mut s = SimState::at_rest(v(&[0.0]));
    s.q_dot = v(&[0.2]);
    let diff = patient_torque(&s, &impaired, 0.0)[0] - patient_torque(&s, &healthy, 0.0)[0];
    assert!((diff + 2.0).abs() < 1e-12);
}

#[test]
fn static_equilibrium_is_preserved() {
    let p = RobotParams::default();
    let s = SimState::at_rest(DVector::zeros(3));
    let z = DVector::zeros(3);
    let mut cur = s.clone();
    for _ in 0..100 {
        cur = step(&cur, &z, &z, &FrictionTruth::zero(3), &p, 1e-3).unwrap();
    }
    assert!((&cur.q - &s.q).amax() < 1e-12);
    assert!(cur.q_dot.amax() < 1e-12 && cur.theta_dot.amax() < 1e-12);
}

fn swing_start(p: &RobotParams) -> SimState {
    SimState::gravity_balanced(v(&[0.5, -0.3, 0.4]), p).unwrap()
}

fn integrate(mut s: SimState, p: &RobotParams, truth: &FrictionTruth, dt: f64, duration: f64) -> SimState {
    let z = DVector::zeros(3);
    let steps = (duration / dt).round() as usize;
    for _ in 0..steps {
        s = step(&s, &z, &z, truth, p, dt).unwrap();
    }
    s
}

#[test]
fn passive_energy_drift_is_small() {
    let p = RobotParams::default();
    let s0 = swing_start(&p);
    let e0 = total_energy(&s0, &p).unwrap();
    let s1 = integrate(s0, &p, &FrictionTruth::zero(3), 1e-3, 10.0);
    let e1 = total_energy(&s1, &p).unwrap();
    let drift = (e1 - e0).abs() / e0;
    assert!(drift < 1e-5, "relative drift {drift:e}");
}

#[test]
fn friction_dissipates_energy() {
    let p = RobotParams::default();
    let mut s = swing_start(&p);
    let truth = FrictionTruth::default();
    let z = DVector::zeros(3);
    let e0 = total_energy(&s, &p).unwrap();
    let mut e_prev = e0;
    // sgn() switching inside an RK4 step can inject a little energy while a
    // joint chatters around zero velocity, so compare 50 ms snapshots with a
    // tolerance of 1e-4 of the initial energy.
    for k in 1..=3000 {
        s = step(&s, &z, &z, &truth, &p, 1e-3).unwrap();
        if k % 50 == 0 {
            let e = total_energy(&s, &p).unwrap();
            assert!(e <= e_prev + 1e-4 * e0, "energy rose from {e_prev} to {e}");
            e_prev = e;
        }
    }
    assert!(e_prev < 0.5 * e0, "friction should remove most of the energy: {e_prev} of {e0}");
}

fn state_error(a: &SimState, b: &SimState) -> f64 {
    (&a.q - &b.q)
        .amax()
        .max((&a.q_dot - &b.q_dot).amax())
        .max((&a.theta - &b.theta).amax())
        .max((&a.theta_dot - &b.theta_dot).amax())
}

#[test]
fn rk4_converges_at_fourth_order() {
    let p = RobotParams::default();
    let s0 = swing_start(&p);
    let duration = 0.5;
    let reference = integrate(s0.clone(), &p, &FrictionTruth::zero(3), 1e-5, duration);
    let dts = [1.25e-4, 6.25e-5, 3.125e-5];
    let errs: Vec<f64> = dts
        .iter()
        .map(|&dt| state_error(&integrate(s0.clone(), &p, &FrictionTruth::zero(3), dt, duration), &reference))
        .collect();
    // least-squares slope of log(err) against log(dt)
    let xs: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 3.0;
    let my = ys.iter().sum::<f64>() / 3.0;
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    assert!((slope - 4.0).abs() <= 0.3, "order {slope}, errors {errs:?}");
}

#[test]
fn step_is_bit_deterministic() {
    let p = RobotParams::default();
    let s0 = swing_start(&p);
    let u = v(&[1.0, -0.5, 0.2]);
    let te = v(&[0.3, 0.0, -0.1]);
    let a = step(&s0, &u, &te, &FrictionTruth::default(), &p, 1e-3).unwrap();
    let b = step(&s0, &u, &te, &FrictionTruth::default(), &p, 1e-3).unwrap();
    assert_eq!(a, b);
}
