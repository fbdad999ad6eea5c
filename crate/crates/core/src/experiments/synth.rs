//! Synthetic healthy demonstrations standing in for transparent-mode recordings.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{dynamics_terms, friction_true, FrictionTruth, RobotParams};
use crate::error::{Error, Result};
use crate::promp::Demonstration;

/// Reach from `home` to `target` and back, with joint limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub home: Vec<f64>,
    pub target: Vec<f64>,
    pub duration: f64,
    pub dt: f64,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            home: vec![0.2, 0.1, 0.3],
            target: vec![0.9, 0.5, 1.2],
            duration: 5.0,
            dt: 0.01,
            q_min: vec![-0.5, -0.6, -0.2],
            q_max: vec![1.6, 1.2, 2.0],
        }
    }
}

impl TaskConfig {
    pub fn n_joints(&self) -> usize {
        self.home.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.home.len();
        if n == 0 || [self.target.len(), self.q_min.len(), self.q_max.len()].iter().any(|&l| l != n) {
            return Err(Error::Config("task waypoints and limits must share one joint count".into()));
        }
        if !(self.duration > 0.0) || !(self.dt > 0.0) || self.dt > self.duration {
            return Err(Error::Config("task needs 0 < dt <= duration".into()));
        }
        for i in 0..n {
            if !(self.q_min[i] < self.q_max[i]) {
                return Err(Error::Config(format!("joint {i}: q_min must be below q_max")));
            }
            for (name, w) in [("home", self.home[i]), ("target", self.target[i])] {
                if !(self.q_min[i]..=self.q_max[i]).contains(&w) {
                    return Err(Error::Config(format!("{name} waypoint of joint {i} ({w}) is outside the joint limits")));
                }
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration / self.dt + 1e-9).floor() as usize + 1
    }

    /// Nominal position, velocity and acceleration at time `t`.
    pub fn nominal(&self, t: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let half = 0.5 * self.duration;
        let (from, to, tau) = if t <= half {
            (&self.home, &self.target, t / half)
        } else {
            (&self.target, &self.home, (t - half) / half)
        };
        let (s, ds, dds) = min_jerk(tau.clamp(0.0, 1.0));
        let n = self.n_joints();
        let delta = DVector::from_fn(n, |i, _| to[i] - from[i]);
        let p = DVector::from_fn(n, |i, _| from[i] + delta[i] * s);
        (p, &delta * (ds / half), &delta * (dds / (half * half)))
    }
}

/// Minimum-jerk profile `10 s^3 - 15 s^4 + 6 s^5` and its first two derivatives.
pub fn min_jerk(s: f64) -> (f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (
        10.0 * s3 - 15.0 * s3 * s + 6.0 * s3 * s2,
        30.0 * s2 - 60.0 * s3 + 30.0 * s2 * s2,
        60.0 * s - 180.0 * s2 + 120.0 * s3,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Constant offset per subject and joint.
    pub subject_bias: f64,
    /// Pointwise standard deviation of the smooth per-repetition perturbation.
    pub rep_sigma: f64,
    pub measurement_sigma: f64,
    /// Number of harmonics in the per-repetition perturbation.
    pub harmonics: usize,
    /// Pointwise standard deviation of the wearer's residual torque in the
    /// recorded `tau_o`, N m.
    pub torque_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { subject_bias: 0.03, rep_sigma: 0.01, measurement_sigma: 0.002, harmonics: 3, torque_sigma: 2.0 }
    }
}

impl SynthConfig {
    pub fn noiseless() -> Self {
        SynthConfig { subject_bias: 0.0, rep_sigma: 0.0, measurement_sigma: 0.0, harmonics: 3, torque_sigma: 0.0 }
    }
}

/// Smooth per-repetition deviation: a random trigonometric sum with pointwise
/// standard deviation `sigma`, faded in and out by `sin^2(pi t / T)`.
struct Perturbation {
    sin: Vec<f64>,
    cos: Vec<f64>,
    duration: f64,
}

impl Perturbation {
    fn draw(sigma: f64, harmonics: usize, duration: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let scale = if harmonics > 0 { sigma / (harmonics as f64).sqrt() } else { 0.0 };
        let normal = Normal::new(0.0, scale).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Perturbation {
            sin: (0..harmonics).map(|_| normal.sample(rng)).collect(),
            cos: (0..harmonics).map(|_| normal.sample(rng)).collect(),
            duration,
        })
    }

    fn value(&self, t: f64) -> f64 {
        let base = std::f64::consts::PI * t / self.duration;
        let fade = base.sin().powi(2);
        let sum: f64 = (0..self.sin.len())
            .map(|k| {
                let w = 2.0 * base * (k + 1) as f64;
                self.sin[k] * w.sin() + self.cos[k] * w.cos()
            })
            .sum();
        fade * sum
    }

    /// Value, first and second time derivative by central differences.
    fn derivatives(&self, t: f64) -> (f64, f64, f64) {
        let h = 1e-4;
        let (a, b, c) = (self.value(t - h), self.value(t), self.value(t + h));
        (b, (c - a) / (2.0 * h), (c - 2.0 * b + a) / (h * h))
    }
}

/// Healthy demonstrations: `n_subjects x n_reps` minimum-jerk reach-and-return
/// motions with subject bias, smooth repetition noise and measurement noise.
/// `tau_o` is the inverse-dynamics torque (including friction) along the
/// noise-free trajectory plus a smooth residual wearer torque.
pub fn synth_demos(
    seed: u64,
    n_subjects: usize,
    n_reps: usize,
    task: &TaskConfig,
    synth: &SynthConfig,
    robot: &RobotParams,
    friction: &FrictionTruth,
) -> Result<Vec<Demonstration>> {
    task.validate()?;
    robot.validate()?;
    let n = task.n_joints();
    if robot.n_joints() != n {
        return Err(Error::Config(format!("task has {n} joints, robot has {}", robot.n_joints())));
    }
    if n_subjects == 0 {
        return Err(Error::Config("need at least one subject".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bias_dist = Normal::new(0.0, synth.subject_bias).map_err(|e| Error::Config(e.to_string()))?;
    let meas_dist = Normal::new(0.0, synth.measurement_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let len = task.n_samples();
    let mut demos = Vec::with_capacity(n_subjects * n_reps);
    for _ in 0..n_subjects {
        let bias: Vec<f64> = (0..n).map(|_| bias_dist.sample(&mut rng)).collect();
        for _ in 0..n_reps {
            let perts = (0..n)
                .map(|_| Perturbation::draw(synth.rep_sigma, synth.harmonics, task.duration, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let effort = (0..n)
                .map(|_| Perturbation::draw(synth.torque_sigma, synth.harmonics, task.duration, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let mut q = DMatrix::zeros(len, n);
            let mut q_dot = DMatrix::zeros(len, n);
            let mut tau_o = DMatrix::zeros(len, n);
            for k in 0..len {
                let t = k as f64 * task.dt;
                let (p, v, a) = task.nominal(t);
                let mut pos = DVector::zeros(n);
                let mut vel = DVector::zeros(n);
                let mut acc = DVector::zeros(n);
                for j in 0..n {
                    let (dp, dv, da) = perts[j].derivatives(t);
                    pos[j] = p[j] + bias[j] + dp;
                    vel[j] = v[j] + dv;
                    acc[j] = a[j] + da;
                }
                let terms = dynamics_terms(&pos, &vel, robot)?;
                let tau = &terms.mass * &acc + &terms.coriolis * &vel + &terms.gravity + friction_true(&vel, friction);
                for j in 0..n {
                    q[(k, j)] = pos[j] + meas_dist.sample(&mut rng);
                    q_dot[(k, j)] = vel[j];
                    tau_o[(k, j)] = tau[j] + effort[j].value(t);
                }
            }
            demos.push(Demonstration { dt: task.dt, q, q_dot, tau_o });
        }
    }
    Ok(demos)
}
