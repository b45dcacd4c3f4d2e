use thiserror::Error;

/// Errors raised by the solvers and checks in this crate.
#[derive(Debug, Error)]
pub enum FbsdeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("control value {value:?} at step {step} lies outside the control region")]
    ControlOutOfRegion { step: usize, value: Vec<f64> },
    #[error("negative singular increment {value} at step {step}, path {path}, column {column}")]
    NegativeIncrement { step: usize, path: usize, column: usize, value: f64 },
    #[error("non-finite state at step {step}, path {path}")]
    NonFinite { step: usize, path: usize },
    #[error("derivative oracle mismatch for {name}: relative error {error:.3e} at point {point:?}")]
    DerivativeMismatch { name: String, error: f64, point: Vec<f64> },
    #[error("non-positive adjoint density q = {value} at step {step}, path {path}")]
    NonPositiveDensity { step: usize, path: usize, value: f64 },
    #[error("transition matrix ill-conditioned at step {step}, path {path} (condition number {cond:.3e})")]
    IllConditioned { step: usize, path: usize, cond: f64 },
    #[error("policy iteration did not converge at time index {time_index}; residual history {history:?}")]
    NoConvergence { time_index: usize, history: Vec<f64> },
    #[error("trajectory leaves the spatial grid at step {step}, path {path} (x = {x})")]
    OutsideGrid { step: usize, path: usize, x: f64 },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("non-reproducible functional: {0}")]
    NonReproducible(String),
    #[error("problem file error: {0}")]
    ProblemFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, FbsdeError>;
