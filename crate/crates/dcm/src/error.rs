//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DcmError>;

#[derive(Debug, Error)]
pub enum DcmError {
    /// Two operands whose shapes must conform do not.
    #[error("{op}: shape mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// A flat buffer does not have the expected number of elements.
    #[error("{op}: expected {expected} elements, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    /// A label row that must be one-hot is not, or a class index is out of range.
    #[error("invalid labels: {0}")]
    InvalidLabels(String),

    /// A constructor or configuration value violates its preconditions.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A computation produced or consumed a non-finite value.
    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    /// Training aborted because the loss left the finite range.
    #[error("numeric divergence at epoch {epoch}, iteration {iteration}: loss is not finite")]
    Diverged { epoch: usize, iteration: usize },

    /// A config file or `--set` override could not be parsed.
    #[error("config error: {0}")]
    Config(String),

    /// An input file (metrics CSV, mask export, checkpoint) is malformed.
    #[error("malformed input {path}, line {line}: {message}")]
    MalformedInput {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DcmError {
    /// Process exit code the CLI maps this error to: 2 for configuration and
    /// validation problems, 3 for numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            DcmError::Diverged { .. } => 3,
            _ => 2,
        }
    }
}
