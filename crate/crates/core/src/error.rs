//! Error type shared across the workspace.

use thiserror::Error;

/// All failure modes surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, unknown architecture ids, malformed
    /// config documents. Validation messages carry field paths.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller passed an argument that violates an operation's precondition.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Non-finite values or other numeric breakdowns inside the engine.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: {detail}")]
    Training { epoch: usize, detail: String },

    /// A checksum or format check on a serialized artifact failed.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A metric has no defined value (e.g. WSR with every sample excluded).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code contract: 0 success, 2 config error,
    /// 3 numeric/training failure, 4 integrity failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Json(_) => 2,
            Error::Numeric(_)
            | Error::Training { .. }
            | Error::UndefinedMetric(_)
            | Error::Io(_) => 3,
            Error::Integrity(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
