use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("division by zero at element {index}")]
    DivByZero { index: usize },

    #[error("log of non-positive value {value} at element {index}")]
    LogDomain { index: usize, value: f64 },

    #[error("singular matrix (|det| = {det:e})")]
    Singular { det: f64 },

    #[error("zero actnorm scale in channel {channel}")]
    ZeroScale { channel: usize },

    #[error("backward requires a one-element tensor, got shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("variable does not belong to the active tape")]
    Detached,

    #[error("reduction over an empty axis set")]
    EmptyAxes,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at line {line}, column {column}: {message}")]
    Config {
        message: String,
        line: usize,
        column: usize,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("png error in {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
