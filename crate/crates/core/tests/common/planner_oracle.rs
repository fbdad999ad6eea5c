//! Brute-force reference for the condensed MPC quadratic program.

use exosim::grader::ScoreGradient;
use exosim::planner::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn grad(q: &[f64]) -> ScoreGradient {
    ScoreGradient { ds_dq: DVector::from_column_slice(q), ds_dtau: DVector::zeros(q.len()) }
}

/// Quadratic program rebuilt from plain rollouts of the model, independent of
/// the condensing code.
pub struct OracleQp {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub c0: f64,
    pub rows: Vec<(DVector<f64>, f64, f64)>,
}

pub fn rollout(x0: &DVector<f64>, u: &DVector<f64>, model: &LtvModel, np: usize) -> Vec<DVector<f64>> {
    let n = model.n_joints();
    let mut xs = Vec::new();
    let mut x = x0.clone();
    for i in 0..np {
        x = &model.a * &x + &model.b_in * u.rows(i * n, n);
        xs.push(x.clone());
    }
    xs
}

pub fn rollout_cost(x0: &DVector<f64>, u: &DVector<f64>, reference: &[DVector<f64>], model: &LtvModel, cfg: &MpcConfig) -> f64 {
    let n = model.n_joints();
    let xs = rollout(x0, u, model, cfg.horizon);
    let mut c = 0.0;
    for (i, x) in xs.iter().enumerate() {
        for k in 0..x.len() {
            c += cfg.q_diag[k] * (x[k] - reference[i][k]).powi(2);
        }
        for j in 0..n {
            c += cfg.r_diag[j] * u[i * n + j].powi(2);
        }
    }
    c
}

pub fn oracle_qp(x0: &DVector<f64>, reference: &[DVector<f64>], model: &LtvModel, cfg: &MpcConfig) -> OracleQp {
    let n = model.n_joints();
    let m = n * cfg.horizon;
    let e = |i: usize| DVector::from_fn(m, |k, _| if k == i { 1.0 } else { 0.0 });
    let cost = |u: &DVector<f64>| rollout_cost(x0, u, reference, model, cfg);
    let c0 = cost(&DVector::zeros(m));
    let mut h = DMatrix::zeros(m, m);
    let mut f = DVector::zeros(m);
    for i in 0..m {
        let (p, q) = (cost(&e(i)), cost(&(-e(i))));
        f[i] = (p - q) / 2.0;
        h[(i, i)] = p + q - 2.0 * c0;
    }
    for i in 0..m {
        for j in 0..i {
            let v = cost(&(e(i) + e(j))) - cost(&e(i)) - cost(&e(j)) + c0;
            h[(i, j)] = v;
            h[(j, i)] = v;
        }
    }
    let mut rows = Vec::new();
    for i in 0..m {
        rows.push((e(i), -cfg.u_max, cfg.u_max));
    }
    let free = rollout(x0, &DVector::zeros(m), model, cfg.horizon);
    let resp: Vec<Vec<DVector<f64>>> = (0..m).map(|i| rollout(x0, &e(i), model, cfg.horizon)).collect();
    for step in 0..cfg.horizon {
        for k in 1..2 * n + 1 {
            let g = DVector::from_fn(m, |i, _| resp[i][step][k] - free[step][k]);
            let (lo, hi) = if k <= n { (cfg.q_min[k - 1], cfg.q_max[k - 1]) } else { (-cfg.v_max, cfg.v_max) };
            rows.push((g, lo - free[step][k], hi - free[step][k]));
        }
    }
    OracleQp { h, f, c0, rows }
}

/// Enumerates every active set of at most `m` bounds, solves the equality
/// constrained problem and keeps the best feasible stationary point.
pub fn enumerate(qp: &OracleQp) -> (f64, DVector<f64>) {
    let m = qp.f.len();
    let nr = qp.rows.len();
    let mut best = (f64::INFINITY, DVector::zeros(m));
    let mut chosen: Vec<(usize, f64)> = Vec::new();
    fn visit(qp: &OracleQp, start: usize, chosen: &mut Vec<(usize, f64)>, best: &mut (f64, DVector<f64>), m: usize, nr: usize) {
        let k = chosen.len();
        let mut kkt = DMatrix::zeros(m + k, m + k);
        kkt.view_mut((0, 0), (m, m)).copy_from(&qp.h);
        let mut rhs = DVector::zeros(m + k);
        rhs.rows_mut(0, m).copy_from(&(-&qp.f));
        for (r, &(i, b)) in chosen.iter().enumerate() {
            for c in 0..m {
                kkt[(m + r, c)] = qp.rows[i].0[c];
                kkt[(c, m + r)] = qp.rows[i].0[c];
            }
            rhs[m + r] = b;
        }
        if let Some(sol) = kkt.clone().lu().solve(&rhs) {
            if (&kkt * &sol - &rhs).amax() < 1e-9 {
                let u = sol.rows(0, m).into_owned();
                let feasible = qp.rows.iter().all(|(g, lo, hi)| {
                    let v = g.dot(&u);
                    v >= lo - 1e-9 && v <= hi + 1e-9
                });
                if feasible {
                    let obj = 0.5 * u.dot(&(&qp.h * &u)) + qp.f.dot(&u) + qp.c0;
                    if obj < best.0 {
                        *best = (obj, u);
                    }
                }
            }
        }
        if k == m {
            return;
        }
        for i in start..nr {
            for b in [qp.rows[i].1, qp.rows[i].2] {
                chosen.push((i, b));
                visit(qp, i + 1, chosen, best, m, nr);
                chosen.pop();
            }
        }
    }
    visit(qp, 0, &mut chosen, &mut best, m, nr);
    best
}

pub struct Instance {
    pub x0: PlannerState,
    pub reference: Vec<DVector<f64>>,
    pub model: LtvModel,
    pub cfg: MpcConfig,
}

/// Random instance whose constraint set the oracle finds non-empty.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    loop {
        let inst = random_candidate(rng);
        let oracle = oracle_qp(&inst.x0.to_vector(), &inst.reference, &inst.model, &inst.cfg);
        if enumerate(&oracle).0.is_finite() {
            return inst;
        }
    }
}

pub fn random_candidate(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.random_range(1..=2usize);
    let np = if n == 1 { rng.random_range(1..=4usize) } else { rng.random_range(1..=2usize) };
    let dt = rng.random_range(0.1..0.4);
    let q_min: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..-0.1)).collect();
    let q_max: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let mut cfg = MpcConfig::new(q_min.clone(), q_max.clone());
    cfg.horizon = np;
    cfg.dt = dt;
    cfg.q_diag = (0..2 * n + 1).map(|_| rng.random_range(0.0..20.0)).collect();
    cfg.r_diag = (0..n).map(|_| rng.random_range(0.05..2.0)).collect();
    cfg.u_max = rng.random_range(0.3..3.0);
    cfg.v_max = rng.random_range(0.3..1.5);
    cfg.tolerance = 1e-9;
    let x0 = PlannerState {
        s: rng.random_range(0.0..4.0),
        q_d: DVector::from_fn(n, |j, _| rng.random_range(q_min[j] * 0.9..q_max[j] * 0.9)),
        q_d_dot: DVector::from_fn(n, |_, _| rng.random_range(-0.9 * cfg.v_max..0.9 * cfg.v_max)),
    };
    let reference = (0..np)
        .map(|_| {
            let mut r = DVector::from_fn(2 * n + 1, |_, _| rng.random_range(-2.0..2.0));
            r[0] = 0.0;
            r
        })
        .collect();
    let g: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let model = build_model(&grad(&g), dt, n).unwrap();
    Instance { x0, reference, model, cfg }
}

/// Runs `count` random instances through the solver and returns the largest
/// objective gap and KKT residual.
pub fn oracle_sweep(seed: u64, count: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut gap, mut kkt) = (0.0f64, 0.0f64);
    for _ in 0..count {
        let inst = random_instance(&mut rng);
        let sol = solve_mpc(&inst.x0, &inst.reference, &inst.model, &inst.cfg).unwrap();
        let (best, _) = enumerate(&oracle_qp(&inst.x0.to_vector(), &inst.reference, &inst.model, &inst.cfg));
        gap = gap.max((sol.cost - best).abs());
        kkt = kkt.max(sol.kkt_residual);
    }
    (gap, kkt)
}
