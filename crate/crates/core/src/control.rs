//! Interaction control: friction adaptation, score-dependent impedance
//! weighting, momentum observer and the composite control law.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{dynamics_terms, sea_torque, RobotParams, SimState};
use crate::error::{Error, Result};
use crate::linalg::sgn;

/// Number of friction coefficients per joint.
pub const FRICTION_TERMS: usize = 3;

/// Row block of joint `i` is `[sgn(v), v, v |v|]`, an odd function of `v`.
pub fn friction_regressor(q_dot: &DVector<f64>) -> DMatrix<f64> {
    let n = q_dot.len();
    let mut y = DMatrix::zeros(n, FRICTION_TERMS * n);
    for (i, &v) in q_dot.iter().enumerate() {
        y[(i, 3 * i)] = sgn(v);
        y[(i, 3 * i + 1)] = v;
        y[(i, 3 * i + 2)] = v * v.abs();
    }
    y
}

pub fn friction_estimate_torque(psi: &DVector<f64>, q_dot: &DVector<f64>) -> DVector<f64> {
    friction_regressor(q_dot) * psi
}

/// Converged coefficients as one `[a, b, c]` row per joint.
pub fn friction_table(psi: &DVector<f64>) -> Vec<[f64; 3]> {
    psi.as_slice().chunks(FRICTION_TERMS).map(|c| [c[0], c[1], c[2]]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptationConfig {
    /// Diagonal gain for one joint's `[a, b, c]` block, shared by all joints.
    pub gamma: [f64; 3],
    pub alpha: f64,
    /// Per-joint dead zone on the sliding variable, in rad/s.
    pub dead_zone: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig { gamma: [1.0, 0.5, 0.5], alpha: 10.0, dead_zone: 0.0 }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gamma.iter().any(|g| !(*g >= 0.0)) || !(self.alpha > 0.0) || !(self.dead_zone >= 0.0) {
            return Err(Error::Config("adaptation gains must be non-negative and alpha positive".into()));
        }
        Ok(())
    }
}

/// Explicit Euler step of `psi' = Gamma Y(q')^T [q' - q_f' + alpha (q - q_f)]`.
pub fn adapt_step(
    psi: &DVector<f64>,
    q: &DVector<f64>,
    q_dot: &DVector<f64>,
    q_f: &DVector<f64>,
    q_f_dot: &DVector<f64>,
    config: &AdaptationConfig,
    dt: f64,
) -> DVector<f64> {
    let mut sliding = (q_dot - q_f_dot) + (q - q_f) * config.alpha;
    sliding.iter_mut().for_each(|s| *s = s.signum() * (s.abs() - config.dead_zone).max(0.0));
    let mut rate = friction_regressor(q_dot).tr_mul(&sliding);
    for (k, r) in rate.iter_mut().enumerate() {
        *r *= config.gamma[k % FRICTION_TERMS];
    }
    psi + rate * dt
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpedanceConfig {
    pub c_d: Vec<f64>,
    pub k_d: Vec<f64>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub m: f64,
    pub h: f64,
    pub s_threshold: f64,
}

/// Named parameterizations of the weighting function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingPreset {
    Fig5,
    Sec5,
}

impl WeightingPreset {
    /// `(lambda1, lambda2, m, h)`.
    pub fn constants(self) -> (f64, f64, f64, f64) {
        match self {
            WeightingPreset::Fig5 => (-4.5, 5.5, 0.4, 10.0),
            WeightingPreset::Sec5 => (-4.5, 10.5, 0.1, 36.0),
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fig5" => Ok(WeightingPreset::Fig5),
            "sec5" => Ok(WeightingPreset::Sec5),
            other => Err(Error::Config(format!("unknown weighting preset '{other}' (expected fig5 or sec5)"))),
        }
    }
}

impl ImpedanceConfig {
    pub fn with_preset(n: usize, preset: WeightingPreset) -> Self {
        let (lambda1, lambda2, m, h) = preset.constants();
        ImpedanceConfig { c_d: vec![30.0; n], k_d: vec![50.0; n], lambda1, lambda2, m, h, s_threshold: 3.0 }
    }

    pub fn apply_preset(&mut self, preset: WeightingPreset) {
        let (l1, l2, m, h) = preset.constants();
        self.lambda1 = l1;
        self.lambda2 = l2;
        self.m = m;
        self.h = h;
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.c_d.len() != n || self.k_d.len() != n {
            return Err(Error::Config(format!("C_d and K_d need {n} diagonal entries")));
        }
        if self.c_d.iter().chain(&self.k_d).any(|x| !(*x > 0.0)) {
            return Err(Error::Config("C_d and K_d must be positive definite".into()));
        }
        if !(self.m > 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() || !self.h.is_finite() {
            return Err(Error::Config("weighting constants must be finite with m > 0".into()));
        }
        // w is monotone in s, so its infimum over s >= 0 is at s = 0 or s -> inf
        let inf = weighting(0.0, self).min(self.lambda2 - self.lambda1);
        if !(inf > 0.0) {
            return Err(Error::Config(format!("weighting function reaches {inf} <= 0 on s >= 0")));
        }
        Ok(())
    }
}

/// `w(s) = lambda1 tanh(-s / m + h) + lambda2`.
pub fn weighting(s: f64, config: &ImpedanceConfig) -> f64 {
    config.lambda1 * (-s / config.m + config.h).tanh() + config.lambda2
}

/// `q_r' = q_d' - C_d^-1 K_d (q - q_d) + C_d^-1 tau_e / w`.
pub fn reference_velocity(
    q: &DVector<f64>,
    q_d: &DVector<f64>,
    q_d_dot: &DVector<f64>,
    tau_e: &DVector<f64>,
    w: f64,
    config: &ImpedanceConfig,
) -> DVector<f64> {
    DVector::from_fn(q.len(), |i, _| {
        q_d_dot[i] - config.k_d[i] / config.c_d[i] * (q[i] - q_d[i]) + tau_e[i] / (w * config.c_d[i])
    })
}

/// `z = q' - q_r'`; zero exactly when the target impedance relation holds.
pub fn impedance_vector(
    q: &DVector<f64>,
    q_dot: &DVector<f64>,
    q_d: &DVector<f64>,
    q_d_dot: &DVector<f64>,
    tau_e: &DVector<f64>,
    w: f64,
    config: &ImpedanceConfig,
) -> DVector<f64> {
    q_dot - reference_velocity(q, q_d, q_d_dot, tau_e, w, config)
}

/// `C_d (q' - q_d') + K_d (q - q_d) - tau_e / w`.
pub fn impedance_residual(
    q: &DVector<f64>,
    q_dot: &DVector<f64>,
    q_d: &DVector<f64>,
    q_d_dot: &DVector<f64>,
    tau_e: &DVector<f64>,
    w: f64,
    config: &ImpedanceConfig,
) -> DVector<f64> {
    DVector::from_fn(q.len(), |i, _| {
        config.c_d[i] * (q_dot[i] - q_d_dot[i]) + config.k_d[i] * (q[i] - q_d[i]) - tau_e[i] / w
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub k_v: Vec<f64>,
    pub k_z: Vec<f64>,
    pub k_o: Vec<f64>,
    /// Cut-off of the low-pass filter on the differentiated interaction term of `q_r'`.
    pub accel_filter_hz: f64,
    /// Cut-off of the smoothing filter on the setpoint's inverse-dynamics torque.
    pub feedforward_filter_hz: f64,
    /// Symmetric clamp on the motor command.
    pub u_max: f64,
}

impl ControllerGains {
    pub fn new(n: usize) -> Self {
        ControllerGains {
            k_v: vec![60.0; n],
            k_z: vec![40.0; n],
            k_o: vec![20.0; n],
            accel_filter_hz: 50.0,
            feedforward_filter_hz: 50.0,
            u_max: 200.0,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k_v.len() != n || self.k_z.len() != n || self.k_o.len() != n {
            return Err(Error::Config(format!("controller gains need {n} diagonal entries")));
        }
        if self.k_v.iter().chain(&self.k_z).chain(&self.k_o).any(|x| !(*x > 0.0)) {
            return Err(Error::Config("controller gains must be positive definite".into()));
        }
        if !(self.accel_filter_hz > 0.0) || !(self.feedforward_filter_hz > 0.0) || !(self.u_max > 0.0) {
            return Err(Error::Config("filter cut-off and torque clamp must be positive".into()));
        }
        Ok(())
    }
}

/// Generalized-momentum residual on the link subsystem.
///
/// With `p = M q'` the residual `r = K_O (p - p0 - int(tau_o + tau_f_hat - g + C^T q' + r))`
/// obeys `r' = K_O (tau_e - r)` when the model is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumObserver {
    integral: DVector<f64>,
    p0: Option<DVector<f64>>,
    pub residual: DVector<f64>,
}

impl MomentumObserver {
    pub fn new(n: usize) -> Self {
        MomentumObserver { integral: DVector::zeros(n), p0: None, residual: DVector::zeros(n) }
    }

    /// Advances the observer by `dt` and returns the interaction torque estimate.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        q: &DVector<f64>,
        q_dot: &DVector<f64>,
        tau_o: &DVector<f64>,
        tau_f_hat: &DVector<f64>,
        params: &RobotParams,
        k_o: &[f64],
        dt: f64,
    ) -> Result<DVector<f64>> {
        let terms = dynamics_terms(q, q_dot, params)?;
        let p = &terms.mass * q_dot;
        let p0 = self.p0.get_or_insert_with(|| p.clone()).clone();
        let beta = tau_o + tau_f_hat - &terms.gravity + terms.coriolis.tr_mul(q_dot) + &self.residual;
        self.integral += beta * dt;
        let diff = p - p0 - &self.integral;
        self.residual = DVector::from_fn(q.len(), |i, _| k_o[i] * diff[i]);
        Ok(self.residual.clone())
    }
}

/// `u = -K_v (theta' - q') - tau_f_hat - tau_e_hat - K_z z + (M + B) q_r'' + C q_r' + g`.
#[allow(clippy::too_many_arguments)]
pub fn control_law(
    state: &SimState,
    deflection_rate_ff: &DVector<f64>,
    q_dot_r: &DVector<f64>,
    q_ddot_r: &DVector<f64>,
    z: &DVector<f64>,
    tau_e_hat: &DVector<f64>,
    tau_f_hat: &DVector<f64>,
    params: &RobotParams,
    gains: &ControllerGains,
) -> Result<DVector<f64>> {
    let terms = dynamics_terms(&state.q, &state.q_dot, params)?;
    let inertia = &terms.mass + params.motor_inertia_matrix();
    let n = state.q.len();
    let damping = DVector::from_fn(n, |i, _| -gains.k_v[i] * (state.theta_dot[i] - state.q_dot[i] - deflection_rate_ff[i]));
    let feedback = DVector::from_fn(n, |i, _| -gains.k_z[i] * z[i]);
    Ok(damping - tau_f_hat - tau_e_hat + feedback + inertia * q_ddot_r + terms.coriolis * q_dot_r + terms.gravity)
}

/// Setpoint handed to the controller at each control step.
#[derive(Debug, Clone, PartialEq)]
pub struct Setpoint {
    pub q_d: DVector<f64>,
    pub q_d_dot: DVector<f64>,
    pub q_d_ddot: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObserverMode {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub u: DVector<f64>,
    pub w: f64,
    pub z: DVector<f64>,
    pub tau_e_hat: DVector<f64>,
    pub tau_f_hat: DVector<f64>,
}

/// Stateful composition of observer, adaptation, impedance and control law.
#[derive(Debug, Clone)]
pub struct Controller {
    pub params: RobotParams,
    pub impedance: ImpedanceConfig,
    pub gains: ControllerGains,
    pub psi: DVector<f64>,
    pub compensate_friction: bool,
    pub adaptation: Option<AdaptationConfig>,
    pub observer_mode: ObserverMode,
    observer: MomentumObserver,
    prev_admittance: Option<DVector<f64>>,
    admittance_rate: DVector<f64>,
    spring_ff: Option<SmoothedSignal>,
    /// Feed the spring deflection implied by the setpoint's inverse dynamics
    /// into the damping term and the motor inertia.
    pub deflection_ff: bool,
}

/// Critically damped second-order low-pass that also yields the first two
/// derivatives of its output.
#[derive(Debug, Clone)]
struct SmoothedSignal {
    y: DVector<f64>,
    y_dot: DVector<f64>,
}

impl SmoothedSignal {
    fn step(&mut self, x: &DVector<f64>, omega: f64, dt: f64) -> DVector<f64> {
        let y_ddot = (x - &self.y) * (omega * omega) - &self.y_dot * (2.0 * omega);
        self.y_dot += &y_ddot * dt;
        self.y += &self.y_dot * dt;
        y_ddot
    }
}

impl Controller {
    pub fn new(
        params: RobotParams,
        impedance: ImpedanceConfig,
        gains: ControllerGains,
        psi: DVector<f64>,
    ) -> Result<Self> {
        let n = params.n_joints();
        params.validate()?;
        impedance.validate(n)?;
        gains.validate(n)?;
        if psi.len() != FRICTION_TERMS * n {
            return Err(Error::Shape(format!("friction estimate needs {} entries", FRICTION_TERMS * n)));
        }
        Ok(Controller {
            params,
            impedance,
            gains,
            psi,
            compensate_friction: true,
            adaptation: None,
            observer_mode: ObserverMode::On,
            observer: MomentumObserver::new(n),
            prev_admittance: None,
            admittance_rate: DVector::zeros(n),
            spring_ff: None,
            deflection_ff: true,
        })
    }

    /// Computes the motor command for the current state and advances the
    /// internal observer, filter and adaptation states by `dt`.
    pub fn update(&mut self, state: &SimState, setpoint: &Setpoint, s: f64, dt: f64) -> Result<ControlOutput> {
        let n = self.params.n_joints();
        let tau_o = sea_torque(&state.theta, &state.q, &self.params);
        let tau_f_hat = if self.compensate_friction {
            friction_estimate_torque(&self.psi, &state.q_dot)
        } else {
            DVector::zeros(n)
        };
        let tau_e_hat = match self.observer_mode {
            ObserverMode::On => {
                self.observer.step(&state.q, &state.q_dot, &tau_o, &tau_f_hat, &self.params, &self.gains.k_o, dt)?
            }
            ObserverMode::Off => DVector::zeros(n),
        };
        let w = weighting(s, &self.impedance);
        let q_dot_r = reference_velocity(&state.q, &setpoint.q_d, &setpoint.q_d_dot, &tau_e_hat, w, &self.impedance);
        let z = &state.q_dot - &q_dot_r;

        let admittance = DVector::from_fn(n, |i, _| tau_e_hat[i] / (w * self.impedance.c_d[i]));
        if let Some(prev) = &self.prev_admittance {
            let raw = (&admittance - prev) / dt;
            let tau = 1.0 / (2.0 * std::f64::consts::PI * self.gains.accel_filter_hz);
            self.admittance_rate += (raw - &self.admittance_rate) * (dt / (tau + dt));
        }
        self.prev_admittance = Some(admittance);
        let q_ddot_r = DVector::from_fn(n, |i, _| {
            let gain = self.impedance.k_d[i] / self.impedance.c_d[i];
            setpoint.q_d_ddot[i] - gain * (state.q_dot[i] - setpoint.q_d_dot[i]) + self.admittance_rate[i]
        });

        let ff_terms = dynamics_terms(&setpoint.q_d, &setpoint.q_d_dot, &self.params)?;
        let spring_ff = &ff_terms.mass * &setpoint.q_d_ddot + &ff_terms.coriolis * &setpoint.q_d_dot + &ff_terms.gravity;
        let omega = 2.0 * std::f64::consts::PI * self.gains.feedforward_filter_hz;
        let filter = self.spring_ff.get_or_insert_with(|| SmoothedSignal { y: spring_ff.clone(), y_dot: DVector::zeros(n) });
        let spring_ff_ddot = filter.step(&spring_ff, omega, dt);
        let (deflection_rate_ff, motor_ff) = if self.deflection_ff {
            let k = &self.params.sea_stiffness;
            (
                DVector::from_fn(n, |i, _| filter.y_dot[i] / k[i]),
                DVector::from_fn(n, |i, _| self.params.motor_inertia[i] * spring_ff_ddot[i] / k[i]),
            )
        } else {
            (DVector::zeros(n), DVector::zeros(n))
        };
        let mut u = control_law(state, &deflection_rate_ff, &q_dot_r, &q_ddot_r, &z, &tau_e_hat, &tau_f_hat, &self.params, &self.gains)?
            + motor_ff;
        u.iter_mut().for_each(|x| *x = x.clamp(-self.gains.u_max, self.gains.u_max));
        if !crate::linalg::is_finite(&u) {
            return Err(Error::Numeric(format!("non-finite control command at t = {}", state.t)));
        }

        if let Some(cfg) = &self.adaptation {
            self.psi = adapt_step(&self.psi, &state.q, &state.q_dot, &setpoint.q_d, &setpoint.q_d_dot, cfg, dt);
        }
        Ok(ControlOutput { u, w, z, tau_e_hat, tau_f_hat })
    }
}
