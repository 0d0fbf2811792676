//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the fusion library.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/image shapes do not satisfy an operation's contract.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    /// Input rejected before computation (bad dims, out-of-range values, ...).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A caller broke an API contract (wrong channel count, bad enum tag, ...).
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// A metric is undefined on this input (e.g. zero-variance difference image).
    #[error("degenerate metric {metric}: {reason}")]
    DegenerateMetric { metric: &'static str, reason: String },

    /// Checkpoint/config fingerprint does not match the expected configuration.
    #[error("config fingerprint mismatch: {}", diffs.join("; "))]
    FingerprintMismatch { diffs: Vec<String> },

    /// Malformed config file, checkpoint, manifest or dataset layout.
    #[error("format error: {0}")]
    Format(String),

    /// Non-finite loss or gradient during training.
    #[error("numeric failure at step {step} (batch {batch_id}): {detail}")]
    NumericFailure {
        step: usize,
        batch_id: u64,
        detail: String,
    },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code for the CLI; each error class gets its own code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ShapeMismatch { .. } | Error::ContractViolation(_) => 4,
            Error::RejectedInput(_) | Error::EmptyInput(_) => 4,
            Error::DegenerateMetric { .. } => 6,
            Error::FingerprintMismatch { .. } => 5,
            Error::Format(_) | Error::Image(_) => 3,
            Error::Io(_) => 3,
            Error::NumericFailure { .. } => 7,
        }
    }

    /// Short machine-parsable kind tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::RejectedInput(_) => "rejected-input",
            Error::ContractViolation(_) => "contract",
            Error::DegenerateMetric { .. } => "degenerate-metric",
            Error::FingerprintMismatch { .. } => "fingerprint",
            Error::Format(_) => "format",
            Error::EmptyInput(_) => "empty-input",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::NumericFailure { .. } => "numeric",
        }
    }
}
