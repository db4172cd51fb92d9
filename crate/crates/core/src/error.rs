use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("framing error: {0}")]
    Framing(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("degenerate constellation: {0}")]
    DegenerateConstellation(String),
    #[error("estimator not applicable: {0}")]
    EstimatorInapplicable(String),
    #[error("weights file version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("corrupt weights file: {0}")]
    Corrupt(String),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error(transparent)]
    Tensor(#[from] tensorkit::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short category name, used for CLI exit codes and messages.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::Tensor(tensorkit::TensorError::Config { .. }) => "config",
            Error::Framing(_) => "framing",
            Error::Numeric(_) | Error::Tensor(tensorkit::TensorError::NonFinite(_)) => "numeric",
            Error::DegenerateConstellation(_) => "constellation",
            Error::EstimatorInapplicable(_) => "estimator",
            Error::Version { .. } | Error::Corrupt(_) | Error::Json(_) => "weights",
            Error::Divergence { .. } => "divergence",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
        }
    }
}
