use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated payload while reading {0}")]
    Truncated(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid data: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("zero-norm vector in {0}")]
    ZeroNorm(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite {term} loss at iteration {iteration}")]
    Diverged { term: &'static str, iteration: usize },

    #[error("no ground truth labels in dataset")]
    NoGroundTruth,
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
