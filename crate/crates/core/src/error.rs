//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: configuration problems,
//! data/IO problems, and numeric failures are distinguishable by callers.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: incompatible shapes, bad hyperparameters,
    /// out-of-range flags.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing input data (bad magic numbers, truncated files,
    /// count mismatches).
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// An intervention plan references a layer or unit that does not exist,
    /// or clamps the same unit twice.
    #[error("plan error: {0}")]
    Plan(String),

    /// An operation was called on a model/trace in the wrong state, e.g.
    /// backward on an eval-mode or intervened trace.
    #[error("state error: {0}")]
    State(String),

    /// Non-finite values where finite ones are required; carries enough
    /// context to locate the failure (layer index, epoch, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable process exit code for the CLI: 2 config/plan/state, 3 data/IO,
    /// 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Plan(_) | Error::State(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
