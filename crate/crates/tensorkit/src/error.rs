use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// A layer was fed a tensor it cannot accept.
    #[error("configuration error in layer `{layer}`: {reason}")]
    Config { layer: String, reason: String },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;
