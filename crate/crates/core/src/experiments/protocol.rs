//! The three-step protocol: demonstrations, friction identification and
//! individualized assistance sessions.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{friction_estimate_torque, friction_table, Controller, ObserverMode, Setpoint, FRICTION_TERMS};
use crate::dynamics::{disturbance_torque, FrictionTruth, PatientModel, SampledTrajectory, SimState};
use crate::error::{Error, Result};
use crate::grader::{calibrate, make_windows, train, window_from_rows, GraderNet};
use crate::planner::{interpolate, plan_step, PlannerDiagnostics, PlannerState};
use crate::promp::{fit_em, mean_trajectory, update_with_demo, Demonstration, PrompModel};

use super::config::{Excitation, ImpairmentConfig, ScenarioConfig};
use super::session::{compute_metrics, MetricsRecord, Rig, SessionLog};
use super::synth::synth_demos;

const CALIBRATION_SALT: u64 = 0x0ca1_1b7a;
const GRADER_SALT: u64 = 0x0006_ade7;
const DIVERGENCE_NORM: f64 = 1e4;

/// The initial demonstration set: `n_demos` recordings drawn subject-major.
pub fn initial_demos(config: &ScenarioConfig) -> Result<Vec<Demonstration>> {
    let reps = config.n_demos.div_ceil(config.n_subjects);
    let mut demos =
        synth_demos(config.seed, config.n_subjects, reps, &config.task, &config.synth, &config.robot, &config.friction)?;
    demos.truncate(config.n_demos);
    Ok(demos)
}

pub fn fit_promp(config: &ScenarioConfig, demos: &[Demonstration]) -> Result<PrompModel> {
    fit_em(demos, &config.basis(), config.promp.em_iters)
}

/// Trains on windows of `demos` and calibrates on a fresh held-out healthy set.
pub fn train_grader(config: &ScenarioConfig, demos: &[Demonstration]) -> Result<GraderNet> {
    let n = config.n_joints();
    let mut windows = Vec::new();
    for d in demos {
        windows.extend(make_windows(d, &config.grader.net)?);
    }
    let mut net = train(&windows, n, &config.grader.net, config.grader.epochs, config.seed ^ GRADER_SALT)?;
    let held_out = calibration_demos(config)?;
    let mut healthy = Vec::new();
    for d in &held_out {
        healthy.extend(make_windows(d, &config.grader.net)?);
    }
    calibrate(&mut net, &healthy)?;
    Ok(net)
}

/// Healthy recordings never seen in training.
pub fn calibration_demos(config: &ScenarioConfig) -> Result<Vec<Demonstration>> {
    synth_demos(
        config.seed ^ CALIBRATION_SALT,
        config.n_subjects,
        config.grader.calibration_reps,
        &config.task,
        &config.synth,
        &config.robot,
        &config.friction,
    )
}

/// Outcome of the friction identification run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrictionReport {
    /// Estimate in the sign of the disturbance torque, as used by the controller.
    pub psi: Vec<f64>,
    /// Per-joint `[a, b, c]` of the friction model `a sgn(v) + b v + c v|v|`
    /// opposing motion.
    pub table: Vec<[f64; 3]>,
    /// Mean `|tau_f - Y psi|` over the scoring window divided by mean `|tau_f|`.
    pub relative_error: f64,
    pub psi_norm: f64,
}

impl FrictionReport {
    pub fn psi_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.psi)
    }
}

/// Piecewise-linear reference repeated with the period of its span.
fn looped_setpoint(traj: &SampledTrajectory, t: f64) -> Setpoint {
    let period = traj.duration();
    let local = t - (t / period).floor() * period;
    let (q_d, q_d_dot) = traj.sample(local);
    let i = ((local / traj.dt).floor() as usize).min(traj.len() - 2);
    let q_d_ddot = DVector::from_fn(traj.n_joints(), |j, _| (traj.q_dot[(i + 1, j)] - traj.q_dot[(i, j)]) / traj.dt);
    Setpoint { q_d, q_d_dot, q_d_ddot }
}

fn start_state(setpoint: &Setpoint, config: &ScenarioConfig) -> Result<SimState> {
    let mut s = SimState::gravity_balanced(setpoint.q_d.clone(), &config.robot)?;
    s.q_dot = setpoint.q_d_dot.clone();
    s.theta_dot = setpoint.q_d_dot.clone();
    Ok(s)
}

/// Tracks a persistently exciting reference with `tau_e = 0` while the
/// adaptation law runs, then scores the estimate against the true disturbance.
pub fn run_friction_identification(
    config: &ScenarioConfig,
    promp: Option<&PrompModel>,
    friction: &FrictionTruth,
) -> Result<(FrictionReport, SessionLog)> {
    config.validate()?;
    let n = config.n_joints();
    let id = &config.identification;
    let reference: Box<dyn Fn(f64) -> Setpoint> = match id.excitation {
        Excitation::MultiSine => Box::new(|t| {
            let (q, v, a) = id.multi_sine(t);
            Setpoint {
                q_d: DVector::from_vec(q),
                q_d_dot: DVector::from_vec(v),
                q_d_ddot: DVector::from_vec(a),
            }
        }),
        Excitation::PrompMean => {
            let model = promp.ok_or_else(|| Error::Config("ProMP-mean excitation needs a fitted ProMP".into()))?;
            let traj = mean_trajectory(model, config.task.duration, config.task.dt);
            Box::new(move |t| looped_setpoint(&traj, t))
        }
    };

    let mut impedance = config.control.resolved_impedance();
    impedance.k_d = impedance.c_d.iter().map(|c| c * id.adaptation.alpha).collect();
    let mut gains = config.control.gains.clone();
    gains.k_z = vec![id.k_z; n];
    let mut controller = Controller::new(config.robot.clone(), impedance, gains, DVector::zeros(FRICTION_TERMS * n))?;
    controller.observer_mode = ObserverMode::Off;
    controller.adaptation = Some(id.adaptation.clone());

    let dt = config.control.dt;
    let steps = (id.duration / dt).round() as usize;
    let score_from = steps - (id.score_window / dt).round() as usize;
    let mut rig = Rig::new(start_state(&reference(0.0), config)?, controller, friction, None, dt, config.session.log_every);
    let (mut err, mut mag) = (0.0, 0.0);
    for k in 0..steps {
        let sp = reference(k as f64 * dt);
        rig.advance(&sp, 0.0)?;
        let psi = &rig.controller.psi;
        if !(psi.norm() <= DIVERGENCE_NORM) {
            return Err(Error::Numeric(format!(
                "friction estimate diverged at t = {:.3} s (|psi| = {:.3e})",
                rig.state.t,
                psi.norm()
            )));
        }
        if k >= score_from {
            let truth = disturbance_torque(&rig.state.q_dot, friction);
            let est = friction_estimate_torque(psi, &rig.state.q_dot);
            err += (&truth - est).abs().sum();
            mag += truth.abs().sum();
        }
    }
    let psi = rig.controller.psi.clone();
    let report = FrictionReport {
        psi: psi.as_slice().to_vec(),
        table: friction_table(&(-&psi)),
        relative_error: if mag > 0.0 { err / mag } else { 0.0 },
        psi_norm: psi.norm(),
    };
    log::info!("friction identification: relative error {:.4}, |psi| {:.4}", report.relative_error, report.psi_norm);
    Ok((report, rig.log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub with_compensation: MetricsRecord,
    pub without_compensation: MetricsRecord,
    /// Mean per-joint RMSE with compensation over the one without.
    pub error_ratio: f64,
}

/// Two runs along the looped ProMP mean without a wearer, differing only in
/// whether the identified friction is fed forward.
pub fn run_tracking_comparison(
    config: &ScenarioConfig,
    promp: &PrompModel,
    psi: &DVector<f64>,
) -> Result<(TrackingReport, SessionLog, SessionLog)> {
    config.validate()?;
    let traj = mean_trajectory(promp, config.task.duration, config.task.dt);
    let run = |compensate: bool| -> Result<SessionLog> {
        let mut controller = Controller::new(
            config.robot.clone(),
            config.control.resolved_impedance(),
            config.control.gains.clone(),
            psi.clone(),
        )?;
        controller.observer_mode = ObserverMode::Off;
        controller.compensate_friction = compensate;
        let dt = config.control.dt;
        let mut rig =
            Rig::new(start_state(&looped_setpoint(&traj, 0.0), config)?, controller, &config.friction, None, dt, config.session.log_every);
        for k in 0..(config.tracking.duration / dt).round() as usize {
            rig.advance(&looped_setpoint(&traj, k as f64 * dt), 0.0)?;
        }
        Ok(rig.log)
    };
    let with_log = run(true)?;
    let without_log = run(false)?;
    let with_compensation = compute_metrics(&with_log, 0)?;
    let without_compensation = compute_metrics(&without_log, 0)?;
    let error_ratio = if without_compensation.rmse_scaled > 0.0 {
        with_compensation.rmse_scaled / without_compensation.rmse_scaled
    } else {
        1.0
    };
    Ok((TrackingReport { with_compensation, without_compensation, error_ratio }, with_log, without_log))
}

/// Task nominal motion sampled on the demonstration grid.
pub fn nominal_trajectory(config: &ScenarioConfig) -> SampledTrajectory {
    let task = &config.task;
    let len = task.n_samples();
    let n = task.n_joints();
    let mut q = DMatrix::zeros(len, n);
    let mut q_dot = DMatrix::zeros(len, n);
    for k in 0..len {
        let (p, v, _) = task.nominal(k as f64 * task.dt);
        q.set_row(k, &p.transpose());
        q_dot.set_row(k, &v.transpose());
    }
    SampledTrajectory { dt: task.dt, q, q_dot }
}

/// Everything the assistance sessions need from the earlier protocol steps.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub demos: Vec<Demonstration>,
    pub promp: PrompModel,
    pub grader: GraderNet,
    pub friction: FrictionReport,
}

impl Pipeline {
    pub fn prepare(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let demos = initial_demos(config)?;
        let promp = fit_promp(config, &demos)?;
        let grader = train_grader(config, &demos)?;
        let (friction, _) = run_friction_identification(config, Some(&promp), &config.friction)?;
        Ok(Pipeline { demos, promp, grader, friction })
    }
}

/// One assistance session.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub log: SessionLog,
    pub metrics: MetricsRecord,
    pub planner: Vec<PlannerDiagnostics>,
    /// The arm's motion resampled on the demonstration grid.
    pub recording: Demonstration,
}

/// Plans on the ProMP mean, assists the wearer for one task duration and
/// records the resulting motion.
pub fn run_session(
    config: &ScenarioConfig,
    promp: &PrompModel,
    grader: &GraderNet,
    psi: &DVector<f64>,
    patient: &PatientModel,
    index: usize,
) -> Result<SessionOutcome> {
    let n = config.n_joints();
    let mpc = &config.planner;
    let reference = mean_trajectory(promp, config.task.duration, mpc.dt);
    let len = reference.len();
    let ref_state = |i: usize| {
        let i = i.min(len - 1);
        let mut x = DVector::zeros(2 * n + 1);
        for j in 0..n {
            x[1 + j] = reference.q[(i, j)];
            x[1 + n + j] = reference.q_dot[(i, j)];
        }
        x
    };
    let project = |v: f64, j: usize| v.clamp(mpc.q_min[j], mpc.q_max[j]);
    let mut plan = PlannerState {
        s: 0.0,
        q_d: DVector::from_fn(n, |j, _| project(reference.q[(0, j)], j)),
        q_d_dot: DVector::from_fn(n, |j, _| reference.q_dot[(0, j)].clamp(-mpc.v_max, mpc.v_max)),
    };

    let controller = Controller::new(
        config.robot.clone(),
        config.control.resolved_impedance(),
        config.control.gains.clone(),
        psi.clone(),
    )?;
    let dt = config.control.dt;
    let ratio = config.plan_ratio();
    let state = SimState::gravity_balanced(plan.q_d.clone(), &config.robot)?;
    let mut rig = Rig::new(state, controller, &config.friction, Some(patient), dt, config.session.log_every);

    let window = config.grader.net.window;
    let mut history: VecDeque<(DVector<f64>, DVector<f64>)> = VecDeque::with_capacity(window);
    let mut rec_q = DMatrix::zeros(len, n);
    let mut rec_qd = DMatrix::zeros(len, n);
    let mut rec_tau = DMatrix::zeros(len, n);
    let mut diagnostics = Vec::with_capacity(len);

    for i in 0..len {
        let tau_o = rig.tau_o();
        rec_q.set_row(i, &rig.state.q.transpose());
        rec_qd.set_row(i, &rig.state.q_dot.transpose());
        rec_tau.set_row(i, &tau_o.transpose());
        if i + 1 == len {
            break;
        }
        if history.is_empty() {
            history.extend(std::iter::repeat_n((rig.state.q.clone(), tau_o.clone()), window));
        } else {
            history.pop_front();
            history.push_back((rig.state.q.clone(), tau_o));
        }
        let qs = DMatrix::from_fn(window, n, |r, c| history[r].0[c]);
        let taus = DMatrix::from_fn(window, n, |r, c| history[r].1[c]);
        let x = window_from_rows(&qs, &taus, n);
        let s = grader.score(&x)?;
        let grad = grader.score_gradient(&x)?;
        plan.s = s.min(config.session.planner_score_cap);
        let horizon: Vec<DVector<f64>> = (1..=mpc.horizon).map(|h| ref_state(i + h)).collect();
        let step = plan_step(&plan, &horizon, &grad, mpc)?;
        diagnostics.push(step.diagnostics);
        for k in 0..ratio {
            let (q_d, q_d_dot) = interpolate(&plan, &step.accel, k as f64 * dt);
            let sp = Setpoint { q_d, q_d_dot, q_d_ddot: step.accel.clone() };
            rig.advance(&sp, s)?;
        }
        plan = step.next;
    }
    let metrics = compute_metrics(&rig.log, index)?;
    let recording = Demonstration { dt: mpc.dt, q: rec_q, q_dot: rec_qd, tau_o: rec_tau };
    Ok(SessionOutcome { log: rig.log, metrics, planner: diagnostics, recording })
}

#[derive(Debug, Clone)]
pub struct Individualization {
    pub sessions: Vec<SessionOutcome>,
    pub converged: bool,
    pub promp: PrompModel,
}

/// Repeats sessions, folding each recording into the ProMP, until every
/// joint's RMSE drops below the stop threshold or the session limit.
pub fn run_individualization(
    config: &ScenarioConfig,
    pipeline: &Pipeline,
    impairment: &ImpairmentConfig,
) -> Result<Individualization> {
    config.validate()?;
    let patient = impairment.patient(nominal_trajectory(config), &config.task)?;
    let psi = pipeline.friction.psi_vector();
    let mut promp = pipeline.promp.clone();
    let mut sessions = Vec::new();
    let mut converged = false;
    for k in 1..=config.session.max_sessions {
        let outcome = run_session(config, &promp, &pipeline.grader, &psi, &patient, k)?;
        let m = &outcome.metrics;
        log::info!(
            "session {k}: rmse {:?} |tau_e| {:.3} w {:.3}",
            m.rmse_per_joint.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
            m.mean_abs_interaction_torque,
            m.mean_weighting
        );
        converged = m.max_rmse() < config.session.stop_rmse;
        let recording = outcome.recording.clone();
        sessions.push(outcome);
        if converged {
            break;
        }
        promp = update_with_demo(&promp, &recording, config.promp.session_demo_weight)?;
    }
    if !converged {
        log::warn!("individualization did not converge within {} sessions", config.session.max_sessions);
    }
    Ok(Individualization { sessions, converged, promp })
}

fn joint_range(log: &SessionLog, joint: usize) -> f64 {
    let (lo, hi) = log
        .rows
        .iter()
        .map(|r| r.q_d[joint])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// First-versus-last session comparison for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub sessions: usize,
    pub converged: bool,
    pub first: MetricsRecord,
    pub last: MetricsRecord,
    /// Planned range of the last joint in the final session over session 1.
    pub elbow_range_ratio: f64,
    pub improved_rmse: bool,
    pub improved_torque: bool,
    pub improved_weighting: bool,
    pub friction_relative_error: f64,
}

impl SeedSummary {
    /// Compares the first and last sessions of one individualization run.
    pub fn compare(
        seed: u64,
        sessions: usize,
        converged: bool,
        first: (&SessionLog, &MetricsRecord),
        last: (&SessionLog, &MetricsRecord),
        friction: &FrictionReport,
    ) -> Self {
        let elbow = first.0.n_joints - 1;
        let base = joint_range(first.0, elbow);
        let (a, b) = (first.1, last.1);
        SeedSummary {
            seed,
            sessions,
            converged,
            first: a.clone(),
            last: b.clone(),
            elbow_range_ratio: if base > 0.0 { joint_range(last.0, elbow) / base } else { 1.0 },
            improved_rmse: b.rmse_scaled < a.rmse_scaled,
            improved_torque: b.mean_abs_interaction_torque < a.mean_abs_interaction_torque,
            improved_weighting: b.mean_weighting < a.mean_weighting,
            friction_relative_error: friction.relative_error,
        }
    }

    pub fn from_run(seed: u64, run: &Individualization, friction: &FrictionReport) -> Result<Self> {
        let first = run.sessions.first().ok_or_else(|| Error::Numeric("no sessions were run".into()))?;
        let last = run.sessions.last().expect("nonempty");
        Ok(Self::compare(
            seed,
            run.sessions.len(),
            run.converged,
            (&first.log, &first.metrics),
            (&last.log, &last.metrics),
            friction,
        ))
    }

    pub fn improved(&self) -> bool {
        self.improved_rmse && self.improved_torque && self.improved_weighting
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub seeds: Vec<SeedSummary>,
    pub all_converged: bool,
    pub all_improved: bool,
    pub min_elbow_range_ratio: f64,
}

impl StudyReport {
    pub fn from_summaries(seeds: Vec<SeedSummary>) -> Self {
        StudyReport {
            all_converged: seeds.iter().all(|s| s.converged),
            all_improved: seeds.iter().all(|s| s.improved()),
            min_elbow_range_ratio: seeds.iter().map(|s| s.elbow_range_ratio).fold(f64::INFINITY, f64::min),
            seeds,
        }
    }
}

/// Full pipeline for one seed against the configured impairment.
pub fn run_seed(config: &ScenarioConfig, seed: u64) -> Result<(Pipeline, Individualization, SeedSummary)> {
    let config = ScenarioConfig { seed, ..config.clone() };
    let pipeline = Pipeline::prepare(&config)?;
    let run = run_individualization(&config, &pipeline, &config.impairment)?;
    let summary = SeedSummary::from_run(seed, &run, &pipeline.friction)?;
    Ok((pipeline, run, summary))
}

/// Runs `seeds` in parallel on `workers` threads; results keep seed order.
pub fn run_study(config: &ScenarioConfig, seeds: &[u64], workers: usize) -> Result<StudyReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    let summaries = pool.install(|| {
        seeds.par_iter().map(|&seed| run_seed(config, seed).map(|(_, _, s)| s)).collect::<Result<Vec<_>>>()
    })?;
    Ok(StudyReport::from_summaries(summaries))
}
