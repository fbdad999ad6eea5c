use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use exosim::experiments::stages::{resolve_config, run_stage, Overrides, Stage};
use exosim::{Error, ErrorCategory};

/// Exoskeleton rehabilitation simulation pipeline.
#[derive(Parser, Debug)]
#[command(name = "exosim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Scenario config file (JSON); built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run directory for artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "run")]
    out: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Weighting preset: fig5 or sec5.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Worker threads for run-study (default: available cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the healthy demonstration set.
    SynthData,
    /// Fit the ProMP to the demonstrations.
    FitPromp,
    /// Train and calibrate the anomaly grader.
    TrainGrader,
    /// Identify friction coefficients on a persistently exciting motion.
    IdentifyFriction,
    /// Compare tracking with and without friction compensation.
    TrackCompare,
    /// Run individualized assistance sessions against the impaired wearer.
    RunSession,
    /// Run the full pipeline over several seeds.
    RunStudy,
    /// Summarize session metrics into report.json.
    Report,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Stage {
        match c {
            Command::SynthData => Stage::SynthData,
            Command::FitPromp => Stage::FitPromp,
            Command::TrainGrader => Stage::TrainGrader,
            Command::IdentifyFriction => Stage::IdentifyFriction,
            Command::TrackCompare => Stage::TrackCompare,
            Command::RunSession => Stage::RunSession,
            Command::RunStudy => Stage::RunStudy,
            Command::Report => Stage::Report,
        }
    }
}

fn init_logging() -> Result<(), Error> {
    let level = std::env::var("EXOSIM_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    if !["error", "warn", "info", "debug"].contains(&level.as_str()) {
        return Err(Error::Config(format!("EXOSIM_LOG_LEVEL must be error, warn, info or debug, got '{level}'")));
    }
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    Ok(())
}

fn run(cli: Cli) -> Result<String, Error> {
    init_logging()?;
    let overrides = Overrides { seed: cli.seed, preset: cli.preset };
    let config = resolve_config(cli.config.as_deref(), &overrides)?;
    let workers = match cli.workers {
        Some(0) => return Err(Error::Config("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    run_stage(cli.command.into(), &config, &cli.out, workers)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (label, code) = match e.category() {
                ErrorCategory::Config => ("config", 2),
                ErrorCategory::Numeric => ("numeric", 3),
                ErrorCategory::Io => ("io", 4),
            };
            eprintln!("error [{label}]: {e}");
            ExitCode::from(code)
        }
    }
}
