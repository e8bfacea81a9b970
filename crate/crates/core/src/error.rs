use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Size(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("projection onto the orbit is not unique (smallest singular value {smallest:.3e})")]
    DegenerateProjection { smallest: f64 },

    #[error("point lies outside the tube: distance {distance:.6e} > radius {radius:.6e}")]
    TubeExceeded { distance: f64, radius: f64 },

    #[error("input is not on the orbit: eta = {eta:.3e}")]
    OffManifold { eta: f64 },

    #[error("chain diverged at step {step} (|X|_F = {norm:.3e})")]
    DivergedChain { step: u64, norm: f64 },

    #[error("initialization failed after {iters} iterations: |grad f| = {grad_norm:.3e}, eta = {eta:.3e}")]
    InitFailed { iters: usize, grad_norm: f64, eta: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("completion mask is empty")]
    EmptyMask,

    #[error("io error: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
