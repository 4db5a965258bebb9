use std::path::PathBuf;

/// Errors produced by the floor plan engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),

    #[error("invalid boundary: {0}")]
    InvalidBoundary(String),

    #[error("value {value} outside the {domain} domain")]
    OutOfDomain { value: f64, domain: &'static str },

    #[error("timestep {t} outside 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("invalid request: {0}")]
    InvalidRequest(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("corpus rejected: {0}")]
    Corpus(String),

    #[error("non-finite loss at step {step}; sample dump written to {dump:?}")]
    NonFiniteLoss { step: usize, dump: Option<PathBuf> },

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from caller input rather than an internal fault.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Tensor(_) | Error::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
