//! Scenario orchestration for the rehabilitation protocol.

pub mod config;
pub mod io;
pub mod protocol;
pub mod session;
pub mod stages;
pub mod synth;

pub use config::{Excitation, ImpairmentConfig, ScenarioConfig};
pub use protocol::{
    nominal_trajectory,
    run_friction_identification, run_individualization, run_seed, run_session, run_study, run_tracking_comparison,
    FrictionReport, Individualization, Pipeline, SeedSummary, SessionOutcome, StudyReport, TrackingReport,
};
pub use session::{compute_metrics, LogRow, MetricsRecord, SessionLog};
pub use synth::{min_jerk, synth_demos, SynthConfig, TaskConfig};
