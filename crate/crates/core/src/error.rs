use std::io;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or configuration values are inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// An API was called out of order (e.g. backward before forward).
    #[error("usage error: {0}")]
    Usage(String),
    /// A loss or activation became non-finite.
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("degenerate geometry: {0}")]
    Geometry(String),
    #[error("generation error: {0}")]
    Generation(String),
    /// Malformed dataset / prediction line.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
