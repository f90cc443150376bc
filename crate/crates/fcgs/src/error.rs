use thiserror::Error;

/// Errors produced by the codec. Grouped so the CLI can map them onto its
/// documented exit codes: format errors (2), weights mismatch (3),
/// corruption (4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("schema error: missing properties: {}", .0.join(", "))]
    MissingProperties(Vec<String>),

    #[error("truncation error: {0}")]
    Truncated(String),

    #[error("serialization error: non-finite value in row {row}")]
    NonFinite { row: usize },

    #[error("weights error: {0}")]
    Weights(String),

    #[error("weights fingerprint mismatch: stream was encoded with {expected}, loaded weights are {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("corruption error: {0}")]
    Corruption(String),

    #[error("coder error: {0}")]
    Coder(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// CLI exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::FingerprintMismatch { .. } => 3,
            Error::Corruption(_) | Error::Coder(_) | Error::Truncated(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
