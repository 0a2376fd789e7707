use thiserror::Error;

/// Errors raised by the calibration library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("singular tridiagonal system: pivot {pivot:e} at row {row}")]
    SingularSystem { row: usize, pivot: f64 },

    #[error("CFL condition violated: ratio {ratio:.4} exceeds 1")]
    CflViolation { ratio: f64 },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("time {t} is not on the simulation lattice with step {dt}")]
    TimeNotOnLattice { t: f64, dt: f64 },

    #[error("snapshot set is empty: nothing to fit")]
    EmptySnapshots,

    #[error("missing required configuration key `{0}`")]
    MissingKey(String),

    #[error("invalid value for configuration key `{key}`: {message}")]
    InvalidKey { key: String, message: String },

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;
