use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input lies outside the domain an operation accepts.
    #[error("input out of domain: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The integrator produced a non-finite derivative.
    #[error("integration blew up at t = {t:.6} s (q = {q:?}, theta = {theta:?})")]
    Integration { t: f64, q: Vec<f64>, theta: Vec<f64> },

    #[error("training diverged at epoch {epoch} (learning rate {learning_rate})")]
    Divergence { epoch: usize, learning_rate: f64 },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("state outside constraint box: {0}")]
    Infeasible(String),

    #[error("QP did not converge after {iterations} iterations (residual {residual:.3e})")]
    QpNotConverged { iterations: usize, residual: f64 },

    #[error("{0}")]
    Numeric(String),

    #[error("missing upstream artifact {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
}

/// Coarse error class used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Numeric,
    Io,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::Domain(_) | Error::Shape(_) | Error::MissingArtifact(_) => {
                ErrorCategory::Config
            }
            Error::Io { .. } | Error::Format { .. } => ErrorCategory::Io,
            _ => ErrorCategory::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
