use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not fit the operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// NaN or infinity where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A precondition of the call was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index {index} out of range for length {len}")]
    Bounds { index: usize, len: usize },

    /// Min-max normalization of a constant vector.
    #[error("degenerate distribution: all values equal")]
    DegenerateDistribution,

    /// Teacher and student disagree on a field the switch pathway depends on.
    #[error("incompatible teacher/student configs: `{field}` differs ({teacher} vs {student})")]
    Compatibility {
        field: &'static str,
        teacher: String,
        student: String,
    },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("parse error in {path} at line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training produced a non-finite loss; `dump` describes the offending batch.
    #[error("non-finite loss at step {step}: {dump}")]
    NonFiniteLoss { step: usize, dump: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
