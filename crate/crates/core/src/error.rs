use thiserror::Error;

/// Errors raised by the discretization, the step solver and the driver.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("point ({}, {}) lies outside the container", point[0], point[1])]
    OutOfDomain { point: [f64; 2] },

    #[error("stored energy is infinite (non-positive Jacobian determinant)")]
    InfiniteEnergy,

    #[error("flow-map inversion failed at node {node} (residual {residual:.3e})")]
    InversionFailure { node: usize, residual: f64 },

    #[error("collision detected at t = {time}: {reason}")]
    CollisionDetected { time: f64, reason: String },

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
