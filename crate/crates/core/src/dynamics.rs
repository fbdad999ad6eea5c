//! Coupled rigid-link / series-elastic-actuator plant.
//!
//! The arm is a planar serial chain moving in a vertical plane. With all joint
//! angles at zero the arm hangs straight down. Each joint is driven through a
//! linear spring by a motor with its own rotor inertia:
//!
//! ```text
//! M(q) q'' + C(q, q') q' + g(q) = K (theta - q) + tau_e + tau_f
//! B theta'' + K (theta - q)     = u
//! ```
//!
//! `tau_f` is the disturbance torque seen by the joint. The ground-truth
//! friction model is dissipative, so the disturbance is `-friction_true(q')`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{is_finite, sgn};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotParams {
    pub link_lengths: Vec<f64>,
    pub link_masses: Vec<f64>,
    /// Distance from each joint axis to the link's center of mass.
    pub link_com_offsets: Vec<f64>,
    /// Link inertia about its center of mass.
    pub link_inertias: Vec<f64>,
    /// Diagonal of the SEA stiffness matrix K.
    pub sea_stiffness: Vec<f64>,
    /// Diagonal of the motor inertia matrix B.
    pub motor_inertia: Vec<f64>,
    pub gravity_accel: f64,
}

impl Default for RobotParams {
    fn default() -> Self {
        let lengths = vec![0.3, 0.3, 0.25];
        let masses = vec![2.0, 1.5, 1.0];
        let com = lengths.iter().map(|l| l / 2.0).collect();
        let inertias = masses.iter().zip(&lengths).map(|(m, l)| m * l * l / 12.0).collect();
        RobotParams {
            link_lengths: lengths,
            link_masses: masses,
            link_com_offsets: com,
            link_inertias: inertias,
            sea_stiffness: vec![3000.0; 3],
            motor_inertia: vec![0.5; 3],
            gravity_accel: 9.81,
        }
    }
}

impl RobotParams {
    pub fn n_joints(&self) -> usize {
        self.link_lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints();
        if n == 0 {
            return Err(Error::Config("robot must have at least one link".into()));
        }
        let fields: [(&str, &Vec<f64>); 6] = [
            ("link_lengths", &self.link_lengths),
            ("link_masses", &self.link_masses),
            ("link_com_offsets", &self.link_com_offsets),
            ("link_inertias", &self.link_inertias),
            ("sea_stiffness", &self.sea_stiffness),
            ("motor_inertia", &self.motor_inertia),
        ];
        for (name, values) in fields {
            if values.len() != n {
                return Err(Error::Config(format!("{name} has {} entries, expected {n}", values.len())));
            }
            if values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("{name} entries must be strictly positive")));
            }
        }
        if !(self.gravity_accel.is_finite() && self.gravity_accel >= 0.0) {
            return Err(Error::Config("gravity_accel must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn stiffness(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.sea_stiffness)
    }

    pub fn motor_inertia_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.motor_inertia))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub q: DVector<f64>,
    pub q_dot: DVector<f64>,
    pub theta: DVector<f64>,
    pub theta_dot: DVector<f64>,
    pub t: f64,
}

impl SimState {
    pub fn at_rest(q: DVector<f64>) -> Self {
        let n = q.len();
        SimState { theta: q.clone(), q, q_dot: DVector::zeros(n), theta_dot: DVector::zeros(n), t: 0.0 }
    }

    /// Rest state whose spring deflection exactly balances gravity.
    pub fn gravity_balanced(q: DVector<f64>, params: &RobotParams) -> Result<Self> {
        let n = q.len();
        let terms = dynamics_terms(&q, &DVector::zeros(n), params)?;
        let theta = &q + terms.gravity.component_div(&params.stiffness());
        Ok(SimState { q, q_dot: DVector::zeros(n), theta, theta_dot: DVector::zeros(n), t: 0.0 })
    }

    pub fn is_finite(&self) -> bool {
        is_finite(&self.q) && is_finite(&self.q_dot) && is_finite(&self.theta) && is_finite(&self.theta_dot)
    }
}

/// Unsimplified Stribeck friction `(a + b exp(-c|v|) + d|v|) sgn(v)` per joint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionTruth {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl Default for FrictionTruth {
    fn default() -> Self {
        FrictionTruth {
            a: vec![1.2, 0.9, 0.6],
            b: vec![0.5, 0.4, 0.3],
            c: vec![2.0, 2.0, 2.5],
            d: vec![0.8, 0.6, 0.4],
        }
    }
}

impl FrictionTruth {
    pub fn zero(n: usize) -> Self {
        FrictionTruth { a: vec![0.0; n], b: vec![0.0; n], c: vec![0.0; n], d: vec![0.0; n] }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, v) in [("a", &self.a), ("b", &self.b), ("c", &self.c), ("d", &self.d)] {
            if v.len() != n {
                return Err(Error::Config(format!("friction.{name} has {} entries, expected {n}", v.len())));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("friction.{name} must be finite")));
            }
        }
        if self.a.iter().chain(&self.c).any(|&x| x < 0.0) {
            return Err(Error::Config("friction a and c coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

/// Time-sampled joint trajectory with linear interpolation; holds the end
/// samples outside its time span.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    pub dt: f64,
    /// One row per sample.
    pub q: DMatrix<f64>,
    pub q_dot: DMatrix<f64>,
}

impl SampledTrajectory {
    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.nrows() == 0
    }

    pub fn n_joints(&self) -> usize {
        self.q.ncols()
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 * self.dt
    }

    pub fn sample(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let n = self.len();
        let x = (t / self.dt).clamp(0.0, (n - 1) as f64);
        let i = (x.floor() as usize).min(n - 1);
        let j = (i + 1).min(n - 1);
        let f = x - i as f64;
        let lerp = |m: &DMatrix<f64>| {
            DVector::from_iterator(m.ncols(), (0..m.ncols()).map(|c| m[(i, c)] * (1.0 - f) + m[(j, c)] * f))
        };
        (lerp(&self.q), lerp(&self.q_dot))
    }
}

/// Simulated wearer: a compliant coupling pulling the arm toward an intended motion.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientModel {
    pub intent: SampledTrajectory,
    pub stiffness: Vec<f64>,
    pub damping: Vec<f64>,
    pub extra_damping: Vec<f64>,
    pub clamp_lo: Vec<f64>,
    pub clamp_hi: Vec<f64>,
}

impl PatientModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.intent.n_joints();
        for (name, v) in [
            ("stiffness", &self.stiffness),
            ("damping", &self.damping),
            ("extra_damping", &self.extra_damping),
        ] {
            if v.len() != n || v.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(Error::Config(format!("patient {name} must have {n} non-negative entries")));
            }
        }
        if self.clamp_lo.len() != n || self.clamp_hi.len() != n {
            return Err(Error::Config(format!("patient clamps must have {n} entries")));
        }
        if self.clamp_lo.iter().zip(&self.clamp_hi).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("patient clamp lower bound must be below upper bound".into()));
        }
        Ok(())
    }

    /// Intended position and velocity at `t` after range clamping. The
    /// velocity is that of the clamped intent, so it vanishes while a joint
    /// sits on its clamp.
    pub fn intent_at(&self, t: f64) -> (DVector<f64>, DVector<f64>) {
        let (mut q, mut qd) = self.intent.sample(t);
        for i in 0..q.len() {
            if q[i] <= self.clamp_lo[i] {
                q[i] = self.clamp_lo[i];
                qd[i] = 0.0;
            } else if q[i] >= self.clamp_hi[i] {
                q[i] = self.clamp_hi[i];
                qd[i] = 0.0;
            }
        }
        (q, qd)
    }
}

#[derive(Debug, Clone)]
pub struct DynamicsTerms {
    pub mass: DMatrix<f64>,
    pub coriolis: DMatrix<f64>,
    pub gravity: DVector<f64>,
}

fn check_finite(name: &str, v: &DVector<f64>) -> Result<()> {
    if is_finite(v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} contains non-finite entries")))
    }
}

/// Per-link kinematic quantities at configuration `q`.
struct Kinematics {
    /// Absolute link angles.
    phi: Vec<f64>,
}

impl Kinematics {
    fn new(q: &DVector<f64>) -> Self {
        let mut acc = 0.0;
        let phi = q
            .iter()
            .map(|&qi| {
                acc += qi;
                acc
            })
            .collect();
        Kinematics { phi }
    }

    /// Column `k` of the COM position Jacobian of link `i` (zero when `k > i`).
    fn jac_col(&self, p: &RobotParams, i: usize, k: usize) -> [f64; 2] {
        if k > i {
            return [0.0, 0.0];
        }
        let mut out = [0.0, 0.0];
        for j in k..i {
            out[0] += p.link_lengths[j] * self.phi[j].cos();
            out[1] += p.link_lengths[j] * self.phi[j].sin();
        }
        out[0] += p.link_com_offsets[i] * self.phi[i].cos();
        out[1] += p.link_com_offsets[i] * self.phi[i].sin();
        out
    }

    /// Partial derivative of `jac_col(i, k)` with respect to `q_l`.
    fn jac_col_deriv(&self, p: &RobotParams, i: usize, k: usize, l: usize) -> [f64; 2] {
        if k > i || l > i {
            return [0.0, 0.0];
        }
        let mut out = [0.0, 0.0];
        for j in k.max(l)..i {
            out[0] -= p.link_lengths[j] * self.phi[j].sin();
            out[1] += p.link_lengths[j] * self.phi[j].cos();
        }
        out[0] -= p.link_com_offsets[i] * self.phi[i].sin();
        out[1] += p.link_com_offsets[i] * self.phi[i].cos();
        out
    }
}

fn mass_matrix(kin: &Kinematics, p: &RobotParams) -> DMatrix<f64> {
    let n = p.n_joints();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        let cols: Vec<[f64; 2]> = (0..n).map(|k| kin.jac_col(p, i, k)).collect();
        for a in 0..=i {
            for b in 0..=i {
                m[(a, b)] += p.link_masses[i] * (cols[a][0] * cols[b][0] + cols[a][1] * cols[b][1])
                    + p.link_inertias[i];
            }
        }
    }
    m
}

/// `dM/dq_l` for every `l`.
fn mass_matrix_derivs(kin: &Kinematics, p: &RobotParams) -> Vec<DMatrix<f64>> {
    let n = p.n_joints();
    (0..n)
        .map(|l| {
            let mut dm = DMatrix::zeros(n, n);
            for i in 0..n {
                for a in 0..=i {
                    let ja = kin.jac_col(p, i, a);
                    let dja = kin.jac_col_deriv(p, i, a, l);
                    for b in 0..=i {
                        let jb = kin.jac_col(p, i, b);
                        let djb = kin.jac_col_deriv(p, i, b, l);
                        dm[(a, b)] += p.link_masses[i]
                            * (dja[0] * jb[0] + dja[1] * jb[1] + ja[0] * djb[0] + ja[1] * djb[1]);
                    }
                }
            }
            dm
        })
        .collect()
}

/// Inertia, Coriolis (Christoffel construction) and gravity terms.
pub fn dynamics_terms(q: &DVector<f64>, q_dot: &DVector<f64>, params: &RobotParams) -> Result<DynamicsTerms> {
    let n = params.n_joints();
    if q.len() != n || q_dot.len() != n {
        return Err(Error::Shape(format!("expected {n} joints, got q {} / q_dot {}", q.len(), q_dot.len())));
    }
    check_finite("q", q)?;
    check_finite("q_dot", q_dot)?;

    let kin = Kinematics::new(q);
    let mass = mass_matrix(&kin, params);
    let dm = mass_matrix_derivs(&kin, params);

    let mut coriolis = DMatrix::zeros(n, n);
    for k in 0..n {
        for j in 0..n {
            let mut c = 0.0;
            for l in 0..n {
                c += 0.5 * (dm[l][(k, j)] + dm[j][(k, l)] - dm[k][(l, j)]) * q_dot[l];
            }
            coriolis[(k, j)] = c;
        }
    }

    let mut gravity = DVector::zeros(n);
    for i in 0..n {
        for k in 0..=i {
            gravity[k] += params.link_masses[i] * params.gravity_accel * kin.jac_col(params, i, k)[1];
        }
    }

    Ok(DynamicsTerms { mass, coriolis, gravity })
}

/// Gravitational potential energy, zero in the hanging configuration.
pub fn potential_energy(q: &DVector<f64>, params: &RobotParams) -> f64 {
    let kin = Kinematics::new(q);
    let mut v = 0.0;
    for i in 0..params.n_joints() {
        let mut height = 0.0;
        let mut rest = 0.0;
        for j in 0..i {
            height -= params.link_lengths[j] * kin.phi[j].cos();
            rest -= params.link_lengths[j];
        }
        height -= params.link_com_offsets[i] * kin.phi[i].cos();
        rest -= params.link_com_offsets[i];
        v += params.link_masses[i] * params.gravity_accel * (height - rest);
    }
    v
}

/// Kinetic energy of links and rotors plus spring and gravity potential.
pub fn total_energy(state: &SimState, params: &RobotParams) -> Result<f64> {
    let terms = dynamics_terms(&state.q, &state.q_dot, params)?;
    let link_ke = 0.5 * state.q_dot.dot(&(&terms.mass * &state.q_dot));
    let motor_ke: f64 =
        (0..params.n_joints()).map(|i| 0.5 * params.motor_inertia[i] * state.theta_dot[i].powi(2)).sum();
    let spring: f64 = (0..params.n_joints())
        .map(|i| 0.5 * params.sea_stiffness[i] * (state.theta[i] - state.q[i]).powi(2))
        .sum();
    Ok(link_ke + motor_ke + spring + potential_energy(&state.q, params))
}

/// SEA output torque `K (theta - q)`.
pub fn sea_torque(theta: &DVector<f64>, q: &DVector<f64>, params: &RobotParams) -> DVector<f64> {
    (theta - q).component_mul(&params.stiffness())
}

/// Resisting Stribeck friction magnitude, odd in velocity.
pub fn friction_true(q_dot: &DVector<f64>, truth: &FrictionTruth) -> DVector<f64> {
    DVector::from_iterator(
        q_dot.len(),
        q_dot.iter().enumerate().map(|(i, &v)| {
            let s = v.abs();
            (truth.a[i] + truth.b[i] * (-truth.c[i] * s).exp() + truth.d[i] * s) * sgn(v)
        }),
    )
}

/// Disturbance torque entering the joint equation: friction opposes motion.
pub fn disturbance_torque(q_dot: &DVector<f64>, truth: &FrictionTruth) -> DVector<f64> {
    -friction_true(q_dot, truth)
}

/// Interaction torque exerted by the wearer on the arm.
pub fn patient_torque(state: &SimState, patient: &PatientModel, t: f64) -> DVector<f64> {
    let (q_h, qd_h) = patient.intent_at(t);
    let n = q_h.len();
    DVector::from_iterator(
        n,
        (0..n).map(|i| {
            patient.stiffness[i] * (q_h[i] - state.q[i])
                + (patient.damping[i] + patient.extra_damping[i]) * (qd_h[i] - state.q_dot[i])
        }),
    )
}

struct Derivative {
    q: DVector<f64>,
    q_dot: DVector<f64>,
    theta: DVector<f64>,
    theta_dot: DVector<f64>,
}

fn derivative(
    state: &SimState,
    u: &DVector<f64>,
    tau_e: &DVector<f64>,
    truth: &FrictionTruth,
    params: &RobotParams,
) -> Result<Derivative> {
    let terms = dynamics_terms(&state.q, &state.q_dot, params)?;
    let tau_o = sea_torque(&state.theta, &state.q, params);
    let rhs = &tau_o + tau_e + disturbance_torque(&state.q_dot, truth)
        - &terms.coriolis * &state.q_dot
        - &terms.gravity;
    let q_ddot = terms
        .mass
        .cholesky()
        .ok_or_else(|| Error::Numeric("mass matrix lost positive definiteness".into()))?
        .solve(&rhs);
    let theta_ddot = (u - &tau_o).component_div(&DVector::from_column_slice(&params.motor_inertia));
    Ok(Derivative { q: state.q_dot.clone(), q_dot: q_ddot, theta: state.theta_dot.clone(), theta_dot: theta_ddot })
}

fn offset(state: &SimState, k: &Derivative, h: f64) -> SimState {
    SimState {
        q: &state.q + &k.q * h,
        q_dot: &state.q_dot + &k.q_dot * h,
        theta: &state.theta + &k.theta * h,
        theta_dot: &state.theta_dot + &k.theta_dot * h,
        t: state.t + h,
    }
}

fn blowup(state: &SimState) -> Error {
    Error::Integration { t: state.t, q: state.q.as_slice().to_vec(), theta: state.theta.as_slice().to_vec() }
}

/// One classical RK4 step of the 4n-dimensional plant with `u` and `tau_e`
/// held constant over the step.
pub fn step(
    state: &SimState,
    u: &DVector<f64>,
    tau_e: &DVector<f64>,
    truth: &FrictionTruth,
    params: &RobotParams,
    dt: f64,
) -> Result<SimState> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(Error::Domain(format!("dt must lie in (0, 0.01], got {dt}")));
    }
    let n = params.n_joints();
    if u.len() != n || tau_e.len() != n {
        return Err(Error::Shape(format!("u and tau_e must have {n} entries")));
    }
    let eval = |s: &SimState| match derivative(s, u, tau_e, truth, params) {
        Ok(d) if is_finite(&d.q_dot) && is_finite(&d.theta_dot) => Ok(d),
        Ok(_) | Err(Error::Domain(_)) | Err(Error::Numeric(_)) => Err(blowup(s)),
        Err(e) => Err(e),
    };
    let k1 = eval(state)?;
    let k2 = eval(&offset(state, &k1, 0.5 * dt))?;
    let k3 = eval(&offset(state, &k2, 0.5 * dt))?;
    let k4 = eval(&offset(state, &k3, dt))?;
    let w = dt / 6.0;
    let combine = |a: &DVector<f64>, b: &DVector<f64>, c: &DVector<f64>, d: &DVector<f64>| (a + b * 2.0 + c * 2.0 + d) * w;
    let next = SimState {
        q: &state.q + combine(&k1.q, &k2.q, &k3.q, &k4.q),
        q_dot: &state.q_dot + combine(&k1.q_dot, &k2.q_dot, &k3.q_dot, &k4.q_dot),
        theta: &state.theta + combine(&k1.theta, &k2.theta, &k3.theta, &k4.theta),
        theta_dot: &state.theta_dot + combine(&k1.theta_dot, &k2.theta_dot, &k3.theta_dot, &k4.theta_dot),
        t: state.t + dt,
    };
    if !next.is_finite() {
        return Err(blowup(&next));
    }
    Ok(next)
}
