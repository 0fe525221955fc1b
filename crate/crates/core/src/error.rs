use std::io;

use thiserror::Error;

/// Errors raised by the engine.
///
/// The CLI maps these onto process exit codes with [`TpError::exit_code`].
#[derive(Debug, Error)]
pub enum TpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {0}")]
    Numeric(String),

    #[error("contrastive update needs a batch of at least 2 samples, got {batch}")]
    ContrastiveBatch { batch: usize },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, TpError>;

impl TpError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        TpError::Dimension {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        TpError::Format {
            offset,
            message: message.into(),
        }
    }

    /// Process exit code: 2 config, 3 data format, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            TpError::Config(_) | TpError::ContrastiveBatch { .. } => 2,
            TpError::Format { .. } => 3,
            TpError::Numeric(_) => 4,
            TpError::Dimension { .. } | TpError::Input(_) | TpError::Io(_) => 1,
        }
    }
}
