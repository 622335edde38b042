use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("format error at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("unknown configuration key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable snake_case name for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Config(_) => "config",
            Error::State(_) => "state",
            Error::Argument(_) => "argument",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Format { .. } => "format",
            Error::UnknownKey { .. } => "unknown_key",
            Error::MissingArtifact(_) => "missing_artifact",
            Error::Io(_) => "io",
        }
    }

    /// Process exit status for the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::UnknownKey { .. } => 2,
            Error::MissingArtifact(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
