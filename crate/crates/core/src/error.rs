use thiserror::Error;

/// Errors raised anywhere in the simulation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid actuator layout: {0}")]
    InvalidLayout(String),

    #[error("actuator {index} of the {family} family is unresolved by the mesh (coupling entry {value:e} below floor {floor:e})")]
    UnresolvedActuator {
        family: &'static str,
        index: usize,
        value: f64,
        floor: f64,
    },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("mass solve residual {residual:e} exceeds tolerance {tolerance:e}")]
    MassResidual { residual: f64, tolerance: f64 },

    #[error("eigenvalue computation failed: {0}")]
    Eigen(String),

    #[error("non-finite value in state after step {step} (t = {time})")]
    NonFinite { step: usize, time: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid configuration `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("invalid series: {0}")]
    Series(String),

    #[error("cache: {0}")]
    Cache(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
