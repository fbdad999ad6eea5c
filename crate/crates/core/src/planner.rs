//! Score-aware receding-horizon planning of the desired trajectory.
//!
//! The planner state `x = [s, q_d, q_d']` evolves under a kinematic model
//! whose score row is linearized around the grader's current gradient; the
//! input is the desired acceleration.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grader::ScoreGradient;
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerState {
    pub s: f64,
    pub q_d: DVector<f64>,
    pub q_d_dot: DVector<f64>,
}

impl PlannerState {
    pub fn n_joints(&self) -> usize {
        self.q_d.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let n = self.n_joints();
        DVector::from_fn(2 * n + 1, |i, _| match i {
            0 => self.s,
            i if i <= n => self.q_d[i - 1],
            i => self.q_d_dot[i - 1 - n],
        })
    }

    pub fn from_vector(x: &DVector<f64>) -> Result<Self> {
        if x.len() % 2 != 1 {
            return Err(Error::Shape(format!("planner state has odd length 2n+1, got {}", x.len())));
        }
        let n = (x.len() - 1) / 2;
        Ok(PlannerState {
            s: x[0],
            q_d: x.rows(1, n).into_owned(),
            q_d_dot: x.rows(1 + n, n).into_owned(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.q_d.len() != self.q_d_dot.len() {
            return Err(Error::Shape("q_d and q_d' differ in length".into()));
        }
        if !self.s.is_finite() || !linalg::is_finite(&self.q_d) || !linalg::is_finite(&self.q_d_dot) {
            return Err(Error::Domain("planner state is not finite".into()));
        }
        Ok(())
    }
}

/// `x[k+1] = A x[k] + B u[k]` over one planner step.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvModel {
    pub a: DMatrix<f64>,
    pub b_in: DMatrix<f64>,
    pub dt: f64,
}

impl LtvModel {
    pub fn n_joints(&self) -> usize {
        self.b_in.ncols()
    }

    pub fn propagate(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b_in * u
    }
}

pub fn build_model(grad: &ScoreGradient, dt: f64, n: usize) -> Result<LtvModel> {
    if grad.ds_dq.len() != n {
        return Err(Error::Shape(format!("score gradient has {} entries, expected {n}", grad.ds_dq.len())));
    }
    if !linalg::is_finite(&grad.ds_dq) {
        return Err(Error::Domain("score gradient is not finite".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::Domain(format!("planner step must be positive, got {dt}")));
    }
    let dim = 2 * n + 1;
    let mut a = DMatrix::identity(dim, dim);
    let mut b_in = DMatrix::zeros(dim, n);
    for j in 0..n {
        a[(0, 1 + n + j)] = grad.ds_dq[j] * dt;
        a[(1 + j, 1 + n + j)] = dt;
        b_in[(1 + n + j, j)] = dt;
    }
    Ok(LtvModel { a, b_in, dt })
}

/// One-step score prediction from both gradient channels.
pub fn predict_score(s: f64, grad: &ScoreGradient, q_dot: &DVector<f64>, tau_o_dot: &DVector<f64>, dt: f64) -> f64 {
    s + (grad.ds_dq.dot(q_dot) + grad.ds_dtau.dot(tau_o_dot)) * dt
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    /// Diagonal of Q, laid out like the planner state.
    pub q_diag: Vec<f64>,
    /// Diagonal of R.
    pub r_diag: Vec<f64>,
    pub u_max: f64,
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub v_max: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl MpcConfig {
    pub fn new(q_min: Vec<f64>, q_max: Vec<f64>) -> Self {
        let n = q_min.len();
        let mut q_diag = vec![10.0];
        q_diag.extend(std::iter::repeat_n(100.0, n));
        q_diag.extend(std::iter::repeat_n(1.0, n));
        MpcConfig {
            horizon: 20,
            dt: 0.01,
            q_diag,
            r_diag: vec![1e-3; n],
            u_max: 5.0,
            q_min,
            q_max,
            v_max: 1.5,
            tolerance: 1e-6,
            max_iterations: 2_000,
        }
    }

    pub fn n_joints(&self) -> usize {
        self.r_diag.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_joints();
        if self.horizon == 0 {
            return Err(Error::Config("MPC horizon must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("MPC step must be positive".into()));
        }
        if self.q_diag.len() != 2 * n + 1 || self.q_min.len() != n || self.q_max.len() != n {
            return Err(Error::Config(format!("MPC weights and bounds must match {n} joints")));
        }
        if self.q_diag.iter().any(|q| !(*q >= 0.0)) || self.r_diag.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::Config("MPC needs Q positive semidefinite and R positive definite".into()));
        }
        if self.q_min.iter().zip(&self.q_max).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::Config("joint bounds must satisfy q_min < q_max".into()));
        }
        if !(self.u_max > 0.0) || !(self.v_max > 0.0) {
            return Err(Error::Config("acceleration and velocity limits must be positive".into()));
        }
        if !(self.tolerance > 0.0) || self.max_iterations == 0 {
            return Err(Error::Config("QP tolerance and iteration budget must be positive".into()));
        }
        Ok(())
    }
}

/// Dense convex QP `min 1/2 x'Hx + f'x  s.t.  lo <= Cx <= hi`.
#[derive(Debug, Clone)]
pub struct BoxQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub c: DMatrix<f64>,
    pub lo: DVector<f64>,
    pub hi: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `Cx`; positive at an upper bound, negative at a lower one.
    pub y: DVector<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
}

impl BoxQp {
    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }

    pub fn kkt_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let stationarity = linalg::max_abs(&(&self.h * x + &self.f + self.c.tr_mul(y)));
        let cx = &self.c * x;
        let mut worst = stationarity;
        for i in 0..cx.len() {
            worst = worst.max(self.lo[i] - cx[i]).max(cx[i] - self.hi[i]);
            let slack = if y[i] > 0.0 { self.hi[i] - cx[i] } else { cx[i] - self.lo[i] };
            if y[i] != 0.0 {
                let gap = if slack.is_finite() { (y[i] * slack).abs() } else { y[i].abs() };
                worst = worst.max(gap);
            }
        }
        worst
    }

    /// Goldfarb-Idnani dual active-set method; requires `H` positive definite.
    /// The KKT residual is accepted relative to the larger of one and the
    /// magnitudes of `f` and `Hx`.
    pub fn solve(&self, tolerance: f64, max_iterations: usize) -> Result<QpSolution> {
        let chol = self
            .h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("QP Hessian is not positive definite".into()))?;
        let h_inv = chol.inverse();

        // one-sided constraints `sign * C_i x >= sign * bound`
        let mut sides: Vec<(usize, f64, f64)> = Vec::new();
        for i in 0..self.c.nrows() {
            if self.lo[i].is_finite() {
                sides.push((i, 1.0, self.lo[i]));
            }
            if self.hi[i].is_finite() {
                sides.push((i, -1.0, -self.hi[i]));
            }
        }
        let g = &h_inv * self.c.transpose();
        let cg = &self.c * &g;
        let normal = |k: usize| -> DVector<f64> { self.c.row(sides[k].0).transpose() * sides[k].1 };
        let slack = |x: &DVector<f64>, k: usize| -> f64 {
            let (i, sign, b) = sides[k];
            sign * self.c.row(i).dot(&x.transpose()) - b
        };

        let mut x = -(&h_inv * &self.f);
        let mut active: Vec<usize> = Vec::new();
        let mut mult: Vec<f64> = Vec::new();
        let scale = 1.0 + linalg::max_abs(&self.f) + self.c.amax();
        let mut iterations = 0;

        loop {
            let violated = (0..sides.len())
                .filter(|k| !active.contains(k))
                .map(|k| (k, slack(&x, k)))
                .filter(|&(_, v)| v < -1e-12 * scale)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            let Some((p, _)) = violated else { break };
            let mut u_p = 0.0;
            loop {
                iterations += 1;
                if iterations > max_iterations {
                    let (x, y) = (x.clone(), self.multipliers(&sides, &active, &mult));
                    return Err(Error::QpNotConverged { iterations: max_iterations, residual: self.kkt_residual(&x, &y) });
                }
                let k = active.len();
                // r = (N' H^-1 N)^-1 N' H^-1 n+,  z = H^-1 n+ - H^-1 N r
                let (ip, sp) = (sides[p].0, sides[p].1);
                let m = DMatrix::from_fn(k, k, |a, b| {
                    let (ia, sa) = (sides[active[a]].0, sides[active[a]].1);
                    let (ib, sb) = (sides[active[b]].0, sides[active[b]].1);
                    sa * sb * cg[(ia, ib)]
                });
                let rhs = DVector::from_fn(k, |a, _| {
                    let (ia, sa) = (sides[active[a]].0, sides[active[a]].1);
                    sa * sp * cg[(ia, ip)]
                });
                let r = if k == 0 {
                    DVector::zeros(0)
                } else {
                    m.lu().solve(&rhs).ok_or_else(|| Error::Numeric("degenerate active set in QP".into()))?
                };
                let mut z = g.column(ip) * sp;
                for a in 0..k {
                    let (ia, sa) = (sides[active[a]].0, sides[active[a]].1);
                    z -= g.column(ia) * (sa * r[a]);
                }
                // largest dual step keeping active multipliers non-negative
                let mut t1 = f64::INFINITY;
                let mut drop = None;
                for a in 0..k {
                    if r[a] > 1e-14 {
                        let t = mult[a] / r[a];
                        if t < t1 {
                            t1 = t;
                            drop = Some(a);
                        }
                    }
                }
                let n_plus = normal(p);
                let curvature = z.dot(&n_plus);
                let full = curvature > 1e-10 * cg[(ip, ip)];
                if !full && drop.is_none() {
                    return Err(Error::Infeasible(format!(
                        "constraint row {} cannot be satisfied together with the active bounds",
                        sides[p].0
                    )));
                }
                let t2 = if full { -slack(&x, p) / curvature } else { f64::INFINITY };
                let t = t1.min(t2);
                if full {
                    x += &z * t;
                }
                for a in 0..k {
                    mult[a] -= t * r[a];
                }
                u_p += t;
                if t2 <= t1 {
                    active.push(p);
                    mult.push(u_p);
                    break;
                }
                let l = drop.expect("blocking constraint");
                active.remove(l);
                mult.remove(l);
            }
        }
        let y = self.multipliers(&sides, &active, &mult);
        let kkt_residual = self.kkt_residual(&x, &y);
        let magnitude = 1.0_f64.max(linalg::max_abs(&self.f)).max(self.h.amax() * linalg::max_abs(&x));
        if kkt_residual > tolerance * magnitude {
            return Err(Error::QpNotConverged { iterations, residual: kkt_residual });
        }
        Ok(QpSolution { x, y, iterations, kkt_residual })
    }

    fn multipliers(&self, sides: &[(usize, f64, f64)], active: &[usize], mult: &[f64]) -> DVector<f64> {
        let mut y = DVector::zeros(self.c.nrows());
        for (a, &k) in active.iter().enumerate() {
            let (i, sign, _) = sides[k];
            y[i] -= sign * mult[a].max(0.0);
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MpcSolution {
    /// Desired accelerations `u_0 .. u_{N-1}`.
    pub inputs: Vec<DVector<f64>>,
    /// `x_0 .. x_N` under the prediction model.
    pub states: Vec<DVector<f64>>,
    pub cost: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub active_constraints: usize,
}

/// The horizon problem in condensed form over the stacked inputs, together
/// with the free response it was built from.
pub fn condense(x0: &DVector<f64>, reference: &[DVector<f64>], model: &LtvModel, config: &MpcConfig) -> Result<(BoxQp, f64)> {
    let n = model.n_joints();
    let dim = 2 * n + 1;
    let np = config.horizon;
    if x0.len() != dim || config.n_joints() != n {
        return Err(Error::Shape(format!("planner state must have {dim} entries")));
    }
    if reference.len() < np {
        return Err(Error::Shape(format!("reference covers {} steps, horizon is {np}", reference.len())));
    }
    if reference[..np].iter().any(|r| r.len() != dim) {
        return Err(Error::Shape(format!("reference states must have {dim} entries")));
    }

    // rows i*dim.. hold x_{i+1}
    let mut phi = DMatrix::zeros(np * dim, np * n);
    let mut free = DVector::zeros(np * dim);
    let mut x = x0.clone();
    let mut a_pow_b = vec![model.b_in.clone()];
    for i in 0..np {
        x = &model.a * &x;
        free.rows_mut(i * dim, dim).copy_from(&x);
        if i > 0 {
            let next = &model.a * &a_pow_b[i - 1];
            a_pow_b.push(next);
        }
        for j in 0..=i {
            phi.view_mut((i * dim, j * n), (dim, n)).copy_from(&a_pow_b[i - j]);
        }
    }
    let q = DVector::from_fn(np * dim, |r, _| config.q_diag[r % dim]);
    let r_w = DVector::from_fn(np * n, |r, _| config.r_diag[r % n]);
    let target = DVector::from_fn(np * dim, |r, _| reference[r / dim][r % dim]);
    let offset = &free - &target;

    let q_phi = DMatrix::from_fn(np * dim, np * n, |r, c| q[r] * phi[(r, c)]);
    let mut h = phi.tr_mul(&q_phi) * 2.0;
    for i in 0..np * n {
        h[(i, i)] += 2.0 * r_w[i];
    }
    let h = linalg::symmetrize(&h);
    let f = q_phi.tr_mul(&offset) * 2.0;
    let constant = offset.dot(&offset.component_mul(&q));

    let rows = np * n + np * 2 * n;
    let mut c = DMatrix::zeros(rows, np * n);
    let mut lo = DVector::zeros(rows);
    let mut hi = DVector::zeros(rows);
    for i in 0..np * n {
        c[(i, i)] = 1.0;
        lo[i] = -config.u_max;
        hi[i] = config.u_max;
    }
    let mut r = np * n;
    for i in 0..np {
        for k in 1..dim {
            let src = i * dim + k;
            c.row_mut(r).copy_from(&phi.row(src));
            let (l, u) = if k <= n {
                (config.q_min[k - 1], config.q_max[k - 1])
            } else {
                (-config.v_max, config.v_max)
            };
            lo[r] = l - free[src];
            hi[r] = u - free[src];
            r += 1;
        }
    }
    Ok((BoxQp { h, f, c, lo, hi }, constant))
}

pub fn solve_mpc(x0: &PlannerState, reference: &[DVector<f64>], model: &LtvModel, config: &MpcConfig) -> Result<MpcSolution> {
    config.validate()?;
    x0.validate()?;
    let n = config.n_joints();
    let slack = 1e-9;
    let mut violations = Vec::new();
    for j in 0..n {
        if x0.q_d[j] < config.q_min[j] - slack || x0.q_d[j] > config.q_max[j] + slack {
            violations.push(format!("q_d[{j}] = {:.6} outside [{}, {}]", x0.q_d[j], config.q_min[j], config.q_max[j]));
        }
        if x0.q_d_dot[j].abs() > config.v_max + slack {
            violations.push(format!("q_d'[{j}] = {:.6} exceeds {}", x0.q_d_dot[j], config.v_max));
        }
    }
    if !violations.is_empty() {
        return Err(Error::Infeasible(violations.join("; ")));
    }

    let x0v = x0.to_vector();
    let (qp, constant) = condense(&x0v, reference, model, config)?;
    let sol = qp.solve(config.tolerance, config.max_iterations)?;
    let cost = (qp.objective(&sol.x) + constant).max(0.0);
    let inputs: Vec<DVector<f64>> = (0..config.horizon).map(|i| sol.x.rows(i * n, n).into_owned()).collect();
    let mut states = vec![x0v];
    for u in &inputs {
        let next = model.propagate(states.last().unwrap(), u);
        states.push(next);
    }
    let active_constraints = sol.y.iter().filter(|v| **v != 0.0).count();
    Ok(MpcSolution { inputs, states, cost, iterations: sol.iterations, kkt_residual: sol.kkt_residual, active_constraints })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerDiagnostics {
    pub cost: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub active_constraints: usize,
    /// Score one step ahead under the prediction model.
    pub predicted_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    /// Setpoint one planner step ahead, inside the configured box.
    pub next: PlannerState,
    /// First desired acceleration of the horizon, applied over the step.
    pub accel: DVector<f64>,
    pub diagnostics: PlannerDiagnostics,
}

/// Desired position, velocity and acceleration `tau` seconds into a step
/// that starts at `state` with constant acceleration `accel`.
pub fn interpolate(state: &PlannerState, accel: &DVector<f64>, tau: f64) -> (DVector<f64>, DVector<f64>) {
    (&state.q_d + &state.q_d_dot * tau + accel * (0.5 * tau * tau), &state.q_d_dot + accel * tau)
}

/// Clamps into `[lo, hi]`, landing exactly on a bound the solver reached to
/// within round-off.
fn project(x: f64, lo: f64, hi: f64) -> f64 {
    let snap = 1e-9 * (1.0 + lo.abs().max(hi.abs()));
    if x >= hi - snap {
        hi
    } else if x <= lo + snap {
        lo
    } else {
        x
    }
}

/// One receding-horizon step: linearize, solve, apply the first input.
pub fn plan_step(x: &PlannerState, reference: &[DVector<f64>], grad: &ScoreGradient, config: &MpcConfig) -> Result<PlanStep> {
    let n = config.n_joints();
    let model = build_model(grad, config.dt, n)?;
    let sol = solve_mpc(x, reference, &model, config)?;
    let accel = sol.inputs[0].map(|u| u.clamp(-config.u_max, config.u_max));
    let (q, v) = interpolate(x, &accel, config.dt);
    let next = PlannerState {
        s: sol.states[1][0],
        q_d: DVector::from_fn(n, |j, _| project(q[j], config.q_min[j], config.q_max[j])),
        q_d_dot: v.map(|v| project(v, -config.v_max, config.v_max)),
    };
    let diagnostics = PlannerDiagnostics {
        cost: sol.cost,
        iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
        active_constraints: sol.active_constraints,
        predicted_score: sol.states[1][0],
    };
    Ok(PlanStep { next, accel, diagnostics })
}
