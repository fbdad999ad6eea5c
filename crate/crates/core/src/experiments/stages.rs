//! Pipeline stages behind the command-line subcommands. Each stage reads its
//! upstream artifacts from the run directory and writes its own next to them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::control::WeightingPreset;
use crate::error::{Error, Result};
use crate::grader::GraderNet;
use crate::promp::PrompModel;

use super::config::ScenarioConfig;
use super::io::{read_demos_csv, read_json, read_log_csv, write_demos_csv, write_json, write_log_csv, write_planner_csv};
use super::protocol::{
    fit_promp, initial_demos, run_friction_identification, run_individualization, run_study, run_tracking_comparison,
    FrictionReport, Pipeline, SeedSummary, StudyReport,
};
use super::session::MetricsRecord;

pub const CONFIG_FILE: &str = "config.json";
pub const DEMOS_FILE: &str = "demos.csv";
pub const PROMP_FILE: &str = "promp.json";
pub const GRADER_FILE: &str = "grader.json";
pub const FRICTION_FILE: &str = "friction.json";
pub const TRACKING_FILE: &str = "tracking.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    SynthData,
    FitPromp,
    TrainGrader,
    IdentifyFriction,
    TrackCompare,
    RunSession,
    RunStudy,
    Report,
}

/// Overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub preset: Option<String>,
}

/// Loads the config (or the defaults), applies overrides and validates.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<ScenarioConfig> {
    let mut config = match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::Config(format!("config file {} does not exist", p.display())));
            }
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(name) = &overrides.preset {
        config.control.preset = Some(WeightingPreset::parse(name)?);
    }
    config.validate()?;
    Ok(config)
}

/// Session metrics written by `run-session`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub seed: u64,
    pub converged: bool,
    pub sessions: Vec<MetricsRecord>,
}

pub fn session_file(k: usize) -> String {
    format!("session_{k}.csv")
}

pub fn planner_file(k: usize) -> String {
    format!("session_{k}_planner.csv")
}

fn load_pipeline(out: &Path) -> Result<(PrompModel, GraderNet, FrictionReport)> {
    Ok((read_json(&out.join(PROMP_FILE))?, read_json(&out.join(GRADER_FILE))?, read_json(&out.join(FRICTION_FILE))?))
}

fn fmt_rmse(m: &MetricsRecord) -> String {
    let joints: Vec<String> = m.rmse_per_joint.iter().map(|r| format!("{r:.4}")).collect();
    format!("[{}]", joints.join(", "))
}

/// Runs one stage and returns its one-line summary.
pub fn run_stage(stage: Stage, config: &ScenarioConfig, out: &Path, workers: usize) -> Result<String> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(CONFIG_FILE), config)?;
    let path = |name: &str| -> PathBuf { out.join(name) };
    match stage {
        Stage::SynthData => {
            let demos = initial_demos(config)?;
            write_demos_csv(&path(DEMOS_FILE), &demos)?;
            Ok(format!("synth-data: {} demonstrations of {} samples -> {DEMOS_FILE}", demos.len(), demos[0].len()))
        }
        Stage::FitPromp => {
            let demos = read_demos_csv(&path(DEMOS_FILE))?;
            let model = fit_promp(config, &demos)?;
            write_json(&path(PROMP_FILE), &model)?;
            Ok(format!("fit-promp: {} basis functions per joint from {} demonstrations -> {PROMP_FILE}", model.basis.n_basis, demos.len()))
        }
        Stage::TrainGrader => {
            let demos = read_demos_csv(&path(DEMOS_FILE))?;
            let net = super::protocol::train_grader(config, &demos)?;
            write_json(&path(GRADER_FILE), &net)?;
            Ok(format!("train-grader: kappa {:.4}, threshold {} -> {GRADER_FILE}", net.kappa, net.threshold))
        }
        Stage::IdentifyFriction => {
            let promp: PrompModel = read_json(&path(PROMP_FILE))?;
            let (report, log) = run_friction_identification(config, Some(&promp), &config.friction)?;
            write_json(&path(FRICTION_FILE), &report)?;
            write_log_csv(&path("identification.csv"), &log)?;
            Ok(format!("identify-friction: relative error {:.4} -> {FRICTION_FILE}", report.relative_error))
        }
        Stage::TrackCompare => {
            let promp: PrompModel = read_json(&path(PROMP_FILE))?;
            let friction: FrictionReport = read_json(&path(FRICTION_FILE))?;
            let (report, with_log, without_log) = run_tracking_comparison(config, &promp, &friction.psi_vector())?;
            write_json(&path(TRACKING_FILE), &report)?;
            write_log_csv(&path("tracking_with.csv"), &with_log)?;
            write_log_csv(&path("tracking_without.csv"), &without_log)?;
            Ok(format!(
                "track-compare: RMSE x100 {:.4} with vs {:.4} without compensation (ratio {:.3}) -> {TRACKING_FILE}",
                report.with_compensation.rmse_scaled, report.without_compensation.rmse_scaled, report.error_ratio
            ))
        }
        Stage::RunSession => {
            let (promp, grader, friction) = load_pipeline(out)?;
            let demos = read_demos_csv(&path(DEMOS_FILE))?;
            let pipeline = Pipeline { demos, promp, grader, friction };
            let run = run_individualization(config, &pipeline, &config.impairment)?;
            for (i, s) in run.sessions.iter().enumerate() {
                write_log_csv(&path(&session_file(i + 1)), &s.log)?;
                write_planner_csv(&path(&planner_file(i + 1)), config.planner.dt, &s.planner)?;
            }
            let metrics = SessionMetrics {
                seed: config.seed,
                converged: run.converged,
                sessions: run.sessions.iter().map(|s| s.metrics.clone()).collect(),
            };
            write_json(&path(METRICS_FILE), &metrics)?;
            let last = metrics.sessions.last().expect("at least one session");
            Ok(format!(
                "run-session: {} sessions, {}, final RMSE {} -> {METRICS_FILE}",
                metrics.sessions.len(),
                if run.converged { "converged" } else { "not converged" },
                fmt_rmse(last)
            ))
        }
        Stage::Report => {
            let metrics: SessionMetrics = read_json(&path(METRICS_FILE))?;
            let friction: FrictionReport = read_json(&path(FRICTION_FILE))?;
            let k = metrics.sessions.len();
            let (first, last) = match (metrics.sessions.first(), metrics.sessions.last()) {
                (Some(a), Some(b)) => (a, b),
                _ => return Err(Error::Format { path: path(METRICS_FILE), message: "no sessions recorded".into() }),
            };
            let first_log = read_log_csv(&path(&session_file(1)))?;
            let last_log = read_log_csv(&path(&session_file(k)))?;
            let summary =
                SeedSummary::compare(metrics.seed, k, metrics.converged, (&first_log, first), (&last_log, last), &friction);
            let report = StudyReport::from_summaries(vec![summary]);
            write_json(&path(REPORT_FILE), &report)?;
            Ok(report_line("report", &report))
        }
        Stage::RunStudy => {
            let seeds: Vec<u64> = (0..config.session.study_seeds as u64).map(|i| config.seed + i).collect();
            let report = run_study(config, &seeds, workers)?;
            write_json(&path(REPORT_FILE), &report)?;
            Ok(report_line("run-study", &report))
        }
    }
}

fn report_line(stage: &str, report: &StudyReport) -> String {
    let sessions: Vec<String> = report.seeds.iter().map(|s| s.sessions.to_string()).collect();
    format!(
        "{stage}: {} seed(s), sessions [{}], all converged {}, all improved {}, min elbow range ratio {:.3} -> {REPORT_FILE}",
        report.seeds.len(),
        sessions.join(", "),
        report.all_converged,
        report.all_improved,
        report.min_elbow_range_ratio
    )
}
