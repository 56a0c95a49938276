//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("value error at row {row}: {msg}")]
    Value { row: usize, msg: String },

    #[error("consistency error at row {row}: {msg}")]
    Consistency { row: usize, msg: String },

    #[error("structure error: {0}")]
    Structure(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("estimability error: {0}")]
    Estimability(String),

    #[error("solver failed to converge after {iterations} iterations (last norm {last_norm:.3e}): {msg}")]
    NonConvergence {
        iterations: usize,
        last_norm: f64,
        msg: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
