use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's contract (shape mismatch, non-scalar loss, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at recovery step {step}")]
    Diverged {
        step: usize,
        trace: Box<crate::annealing::LossTrace>,
    },

    #[error("target compression ratio {target} is infeasible; largest achievable is {max_achievable} at base threshold {at_threshold}")]
    Infeasible {
        target: f64,
        max_achievable: f64,
        at_threshold: f64,
    },

    #[error("missing artifact {}: run `{phase}` first", path.display())]
    MissingArtifact { path: PathBuf, phase: &'static str },

    #[error(transparent)]
    Checkpoint(#[from] crate::pipeline::checkpoint::CheckpointError),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Contract(_) => "contract",
            Error::Precondition(_) => "precondition",
            Error::Config(_) => "config",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Infeasible { .. } => "infeasible",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
