//! Session logs, metrics and the closed-loop simulation rig.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::control::{ControlOutput, Controller, Setpoint};
use crate::dynamics::{patient_torque, sea_torque, step, FrictionTruth, PatientModel, SimState};
use crate::error::{Error, Result};

/// One logged control step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub q: DVector<f64>,
    pub q_dot: DVector<f64>,
    pub q_d: DVector<f64>,
    pub q_d_dot: DVector<f64>,
    pub theta: DVector<f64>,
    pub tau_o: DVector<f64>,
    pub tau_e: DVector<f64>,
    pub tau_e_hat: DVector<f64>,
    pub tau_f_hat: DVector<f64>,
    pub s: f64,
    pub w: f64,
    pub u: DVector<f64>,
}

impl LogRow {
    /// Flattened values in column order.
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.t];
        for x in [&self.q, &self.q_dot, &self.q_d, &self.q_d_dot, &self.theta, &self.tau_o, &self.tau_e, &self.tau_e_hat, &self.tau_f_hat] {
            v.extend(x.iter());
        }
        v.push(self.s);
        v.push(self.w);
        v.extend(self.u.iter());
        v
    }

    pub fn from_values(values: &[f64], n: usize) -> Result<Self> {
        if values.len() != SessionLog::column_count(n) {
            return Err(Error::Shape(format!("log row has {} values, expected {}", values.len(), SessionLog::column_count(n))));
        }
        let vec = |k: usize| DVector::from_column_slice(&values[1 + k * n..1 + (k + 1) * n]);
        let tail = 1 + 9 * n;
        Ok(LogRow {
            t: values[0],
            q: vec(0),
            q_dot: vec(1),
            q_d: vec(2),
            q_d_dot: vec(3),
            theta: vec(4),
            tau_o: vec(5),
            tau_e: vec(6),
            tau_e_hat: vec(7),
            tau_f_hat: vec(8),
            s: values[tail],
            w: values[tail + 1],
            u: DVector::from_column_slice(&values[tail + 2..tail + 2 + n]),
        })
    }
}

/// Time series of a closed-loop run, sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionLog {
    pub n_joints: usize,
    pub dt: f64,
    pub rows: Vec<LogRow>,
}

impl SessionLog {
    pub fn new(n_joints: usize, dt: f64) -> Self {
        SessionLog { n_joints, dt, rows: Vec::new() }
    }

    pub fn column_count(n: usize) -> usize {
        10 * n + 3
    }

    pub fn header(n: usize) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        for name in ["q", "q_dot", "q_d", "q_d_dot", "theta", "tau_o", "tau_e", "tau_e_hat", "tau_f_hat"] {
            h.extend((0..n).map(|j| format!("{name}_{j}")));
        }
        h.push("s".into());
        h.push("w".into());
        h.extend((0..n).map(|j| format!("u_{j}")));
        h
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Shape("log dt must be positive".into()));
        }
        for (k, r) in self.rows.iter().enumerate() {
            let values = r.values();
            if values.len() != Self::column_count(self.n_joints) {
                return Err(Error::Shape(format!("log row {k} has the wrong width")));
            }
            if values.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!("log row {k} is not finite")));
            }
            if (r.t - self.rows[0].t - k as f64 * self.dt).abs() > 1e-9 * (1.0 + r.t.abs()) {
                return Err(Error::Shape(format!("log row {k} breaks the uniform time grid")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub session: usize,
    pub rmse_per_joint: Vec<f64>,
    /// 100 times the mean per-joint RMSE.
    pub rmse_scaled: f64,
    pub mean_abs_interaction_torque: f64,
    pub mean_weighting: f64,
}

impl MetricsRecord {
    pub fn max_rmse(&self) -> f64 {
        self.rmse_per_joint.iter().cloned().fold(0.0, f64::max)
    }
}

pub fn compute_metrics(log: &SessionLog, session: usize) -> Result<MetricsRecord> {
    if log.rows.is_empty() {
        return Err(Error::Shape("cannot compute metrics of an empty log".into()));
    }
    let n = log.n_joints;
    let count = log.rows.len() as f64;
    let mut sq = vec![0.0; n];
    let mut torque = 0.0;
    let mut w = 0.0;
    for r in &log.rows {
        for j in 0..n {
            sq[j] += (r.q[j] - r.q_d[j]).powi(2);
        }
        torque += r.tau_e.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        w += r.w;
    }
    let rmse_per_joint: Vec<f64> = sq.iter().map(|s| (s / count).sqrt()).collect();
    let rmse_scaled = 100.0 * rmse_per_joint.iter().sum::<f64>() / n as f64;
    Ok(MetricsRecord {
        session,
        rmse_per_joint,
        rmse_scaled,
        mean_abs_interaction_torque: torque / count,
        mean_weighting: w / count,
    })
}

/// Plant, controller and optional wearer advanced together at the control rate.
pub struct Rig<'a> {
    pub state: SimState,
    pub controller: Controller,
    pub friction: &'a FrictionTruth,
    pub patient: Option<&'a PatientModel>,
    pub dt: f64,
    pub log_every: usize,
    pub log: SessionLog,
    steps: usize,
}

impl<'a> Rig<'a> {
    pub fn new(
        state: SimState,
        controller: Controller,
        friction: &'a FrictionTruth,
        patient: Option<&'a PatientModel>,
        dt: f64,
        log_every: usize,
    ) -> Self {
        let n = state.q.len();
        Rig { state, controller, friction, patient, dt, log_every, log: SessionLog::new(n, dt * log_every as f64), steps: 0 }
    }

    pub fn tau_o(&self) -> DVector<f64> {
        sea_torque(&self.state.theta, &self.state.q, &self.controller.params)
    }

    /// One control period: command, log, integrate.
    pub fn advance(&mut self, setpoint: &Setpoint, s: f64) -> Result<ControlOutput> {
        let tau_e = match self.patient {
            Some(p) => patient_torque(&self.state, p, self.state.t),
            None => DVector::zeros(self.state.q.len()),
        };
        let out = self.controller.update(&self.state, setpoint, s, self.dt)?;
        if self.steps.is_multiple_of(self.log_every) {
            self.log.rows.push(LogRow {
                t: self.state.t,
                q: self.state.q.clone(),
                q_dot: self.state.q_dot.clone(),
                q_d: setpoint.q_d.clone(),
                q_d_dot: setpoint.q_d_dot.clone(),
                theta: self.state.theta.clone(),
                tau_o: self.tau_o(),
                tau_e: tau_e.clone(),
                tau_e_hat: out.tau_e_hat.clone(),
                tau_f_hat: out.tau_f_hat.clone(),
                s,
                w: out.w,
                u: out.u.clone(),
            });
        }
        let t_next = (self.steps + 1) as f64 * self.dt;
        self.state = step(&self.state, &out.u, &tau_e, self.friction, &self.controller.params, self.dt)?;
        self.state.t = t_next;
        self.steps += 1;
        Ok(out)
    }
}
