use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid controls: {0}")]
    InvalidControls(String),

    #[error("invalid target gate: {0}")]
    InvalidTarget(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("time {t} ns outside pulse window [0, {duration} ns]")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("parameter index {index} out of range for dimension {dim}")]
    ParameterIndex { index: usize, dim: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("implicit stage matrix is singular at step {step} (pivot {pivot:.3e})")]
    SingularStage { step: usize, pivot: f64 },

    #[error("singular matrix in linear solve (pivot {pivot:.3e})")]
    SingularMatrix { pivot: f64 },

    #[error("invalid optimizer settings: {0}")]
    InvalidOptimizer(String),

    #[error("spectrum sample count {0} is not a power of two")]
    FftLength(usize),

    #[error("{what} did not converge after {iterations} iterations")]
    NoConvergence { what: String, iterations: usize },
}
