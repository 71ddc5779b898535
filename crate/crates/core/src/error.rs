use thiserror::Error;

/// Errors raised by the estimation, inference and harness layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside the support of {family}")]
    Domain { family: &'static str, value: f64 },

    #[error("parameter {theta:?} is on the boundary of the parameter box; {what} is undefined there")]
    Boundary { theta: Vec<f64>, what: &'static str },

    #[error("parameter {theta:?} lies outside the parameter box")]
    OutOfBox { theta: Vec<f64> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("problem too large: {0}")]
    Scale(String),

    #[error("fixed-point iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        trace: Vec<f64>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line harness.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) | Error::Io(_) | Error::Json(_) => 1,
            Error::Scale(_) | Error::Domain { .. } | Error::OutOfBox { .. } => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
