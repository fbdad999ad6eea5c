//! Scenario configuration: one file with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{AdaptationConfig, ControllerGains, ImpedanceConfig, WeightingPreset};
use crate::dynamics::{FrictionTruth, PatientModel, RobotParams, SampledTrajectory};
use crate::error::{Error, Result};
use crate::grader::GraderConfig;
use crate::planner::MpcConfig;
use crate::promp::BasisConfig;

use super::synth::{SynthConfig, TaskConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrompSettings {
    pub n_basis: usize,
    pub em_iters: usize,
    /// Weight given to each session recording when it joins the model.
    pub session_demo_weight: f64,
}

impl Default for PrompSettings {
    fn default() -> Self {
        PrompSettings { n_basis: 15, em_iters: 20, session_demo_weight: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraderSettings {
    pub net: GraderConfig,
    pub epochs: usize,
    /// Repetitions per subject in the held-out calibration set.
    pub calibration_reps: usize,
}

impl Default for GraderSettings {
    fn default() -> Self {
        GraderSettings { net: GraderConfig::default(), epochs: 60, calibration_reps: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControlSettings {
    /// Overrides the weighting constants in `impedance` when set.
    pub preset: Option<WeightingPreset>,
    pub impedance: ImpedanceConfig,
    pub gains: ControllerGains,
    pub dt: f64,
}

impl Default for ControlSettings {
    fn default() -> Self {
        ControlSettings {
            preset: Some(WeightingPreset::Sec5),
            impedance: ImpedanceConfig::with_preset(3, WeightingPreset::Sec5),
            gains: ControllerGains::new(3),
            dt: 1e-3,
        }
    }
}

impl ControlSettings {
    /// Impedance with the preset constants applied.
    pub fn resolved_impedance(&self) -> ImpedanceConfig {
        let mut imp = self.impedance.clone();
        if let Some(p) = self.preset {
            imp.apply_preset(p);
        }
        imp
    }
}

/// Reference trajectory used for friction identification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Excitation {
    /// Sum of sines per joint.
    MultiSine,
    /// The fitted ProMP mean, repeated back to back.
    PrompMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationConfig {
    pub duration: f64,
    pub excitation: Excitation,
    pub amplitude: f64,
    /// Angular frequencies shared by all joints, rad/s.
    pub omega: Vec<f64>,
    /// Mean posture of the multi-sine.
    pub center: Vec<f64>,
    /// Impedance-vector gain during identification.
    pub k_z: f64,
    pub adaptation: AdaptationConfig,
    /// Window at the end of the run over which the fit is scored, s.
    pub score_window: f64,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        IdentificationConfig {
            duration: 60.0,
            excitation: Excitation::MultiSine,
            amplitude: 0.4,
            omega: vec![0.91, 2.03, 3.29],
            center: vec![0.55, 0.3, 0.75],
            k_z: 8.0,
            adaptation: AdaptationConfig::default(),
            score_window: 10.0,
        }
    }
}

impl IdentificationConfig {
    /// Multi-sine position, velocity and acceleration at `t`.
    pub fn multi_sine(&self, t: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.center.len();
        let m = self.omega.len();
        let mut q = self.center.clone();
        let mut v = vec![0.0; n];
        let mut a = vec![0.0; n];
        for j in 0..n {
            for (k, &w) in self.omega.iter().enumerate() {
                let phase = w * t + 1.7 * (j * m + k) as f64;
                q[j] += self.amplitude * phase.sin();
                v[j] += self.amplitude * w * phase.cos();
                a[j] -= self.amplitude * w * w * phase.sin();
            }
        }
        (q, v, a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingConfig {
    pub duration: f64,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        TrackingConfig { duration: 30.0 }
    }
}

/// Wearer coupling and impairment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpairmentConfig {
    pub stiffness: Vec<f64>,
    pub damping: Vec<f64>,
    pub extra_damping: Vec<f64>,
    /// Reachable range per joint; `None` leaves the joint limits in place.
    pub clamp_lo: Vec<Option<f64>>,
    pub clamp_hi: Vec<Option<f64>>,
}

impl Default for ImpairmentConfig {
    fn default() -> Self {
        ImpairmentConfig {
            stiffness: vec![300.0; 3],
            damping: vec![2.0; 3],
            extra_damping: vec![8.0, 0.0, 0.0],
            clamp_lo: vec![None; 3],
            clamp_hi: vec![Some(0.5), Some(0.42), None],
        }
    }
}

impl ImpairmentConfig {
    /// Same coupling with no clamps and no extra damping.
    pub fn healthy(&self) -> Self {
        let n = self.stiffness.len();
        ImpairmentConfig {
            extra_damping: vec![0.0; n],
            clamp_lo: vec![None; n],
            clamp_hi: vec![None; n],
            ..self.clone()
        }
    }

    pub fn patient(&self, intent: SampledTrajectory, task: &TaskConfig) -> Result<PatientModel> {
        let pick = |v: &[Option<f64>], fallback: &[f64]| -> Vec<f64> {
            v.iter().zip(fallback).map(|(c, f)| c.unwrap_or(*f)).collect()
        };
        let patient = PatientModel {
            intent,
            stiffness: self.stiffness.clone(),
            damping: self.damping.clone(),
            extra_damping: self.extra_damping.clone(),
            clamp_lo: pick(&self.clamp_lo, &task.q_min),
            clamp_hi: pick(&self.clamp_hi, &task.q_max),
        };
        patient.validate()?;
        Ok(patient)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub max_sessions: usize,
    /// Stop once every joint's RMSE is below this, rad.
    pub stop_rmse: f64,
    /// Control steps between logged rows.
    pub log_every: usize,
    /// Upper clip on the score handed to the planner.
    pub planner_score_cap: f64,
    /// Consecutive seeds, starting at `seed`, covered by a study.
    pub study_seeds: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            max_sessions: 60, stop_rmse: 0.0349, log_every: 10, planner_score_cap: crate::grader::SAFE_THRESHOLD,
            study_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub n_subjects: usize,
    /// Initial demonstrations, drawn subject-major.
    pub n_demos: usize,
    pub task: TaskConfig,
    pub synth: SynthConfig,
    pub robot: RobotParams,
    pub friction: FrictionTruth,
    pub impairment: ImpairmentConfig,
    pub promp: PrompSettings,
    pub grader: GraderSettings,
    pub planner: MpcConfig,
    pub control: ControlSettings,
    pub identification: IdentificationConfig,
    pub tracking: TrackingConfig,
    pub session: SessionConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let task = TaskConfig::default();
        let mut planner = MpcConfig::new(task.q_min.clone(), task.q_max.clone());
        planner.q_diag[0] = 0.01;
        ScenarioConfig {
            seed: 7,
            n_subjects: 3,
            n_demos: 7,
            planner,
            task,
            synth: SynthConfig::default(),
            robot: RobotParams::default(),
            friction: FrictionTruth::default(),
            impairment: ImpairmentConfig::default(),
            promp: PrompSettings::default(),
            grader: GraderSettings::default(),
            control: ControlSettings::default(),
            identification: IdentificationConfig::default(),
            tracking: TrackingConfig::default(),
            session: SessionConfig::default(),
        }
    }
}

fn is_multiple(a: f64, b: f64) -> bool {
    let r = a / b;
    r >= 1.0 - 1e-9 && (r - r.round()).abs() < 1e-9
}

impl ScenarioConfig {
    pub fn n_joints(&self) -> usize {
        self.task.n_joints()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ScenarioConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn basis(&self) -> BasisConfig {
        BasisConfig::uniform(self.n_joints(), self.promp.n_basis, self.task.duration, self.task.dt)
    }

    /// Control steps per planner step.
    pub fn plan_ratio(&self) -> usize {
        (self.planner.dt / self.control.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        let n = self.n_joints();
        self.robot.validate()?;
        if self.robot.n_joints() != n {
            return Err(Error::Config(format!("robot has {} joints, task has {n}", self.robot.n_joints())));
        }
        self.friction.validate(n)?;
        if self.n_subjects == 0 || self.n_demos == 0 {
            return Err(Error::Config("need at least one subject and one demonstration".into()));
        }
        if [self.synth.subject_bias, self.synth.rep_sigma, self.synth.measurement_sigma, self.synth.torque_sigma].iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("synthetic noise scales must be non-negative".into()));
        }
        self.basis().validate()?;
        if self.promp.em_iters == 0 || !(self.promp.session_demo_weight > 0.0) {
            return Err(Error::Config("ProMP needs EM iterations and a positive session weight".into()));
        }
        self.grader.net.validate(n)?;
        if self.grader.epochs == 0 || self.grader.calibration_reps == 0 {
            return Err(Error::Config("grader needs training epochs and calibration repetitions".into()));
        }
        self.planner.validate()?;
        if self.planner.n_joints() != n {
            return Err(Error::Config(format!("planner configured for {} joints, task has {n}", self.planner.n_joints())));
        }
        self.control.resolved_impedance().validate(n)?;
        self.control.gains.validate(n)?;
        if !(self.control.dt > 0.0 && self.control.dt <= 0.01) {
            return Err(Error::Config("control step must lie in (0, 0.01] s".into()));
        }
        if !is_multiple(self.planner.dt, self.control.dt) {
            return Err(Error::Config("planner step must be a whole multiple of the control step".into()));
        }
        if (self.planner.dt - self.task.dt).abs() > 1e-12 {
            return Err(Error::Config("planner step must equal the demonstration sample step".into()));
        }
        let id = &self.identification;
        id.adaptation.validate()?;
        if id.center.len() != n || id.omega.is_empty() || !(id.k_z > 0.0) || !(id.amplitude >= 0.0) {
            return Err(Error::Config("identification needs an n-joint center, frequencies and k_z > 0".into()));
        }
        if !(id.duration > 0.0) || !(id.score_window > 0.0 && id.score_window <= id.duration) {
            return Err(Error::Config("identification needs 0 < score window <= duration".into()));
        }
        if !(self.tracking.duration > 0.0) {
            return Err(Error::Config("tracking duration must be positive".into()));
        }
        let imp = &self.impairment;
        if [imp.damping.len(), imp.extra_damping.len(), imp.clamp_lo.len(), imp.clamp_hi.len()].iter().any(|&l| l != n)
            || imp.stiffness.len() != n
        {
            return Err(Error::Config(format!("impairment entries must have {n} joints")));
        }
        if self.session.max_sessions == 0 || !(self.session.stop_rmse > 0.0) || self.session.log_every == 0
            || !(self.session.planner_score_cap > 0.0)
            || self.session.study_seeds == 0
        {
            return Err(Error::Config("sessions need a positive limit, stop RMSE and log decimation".into()));
        }
        Ok(())
    }
}
