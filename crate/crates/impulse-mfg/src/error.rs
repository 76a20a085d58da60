//! Error type shared by all solvers.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        residual: f64,
    },

    /// The requested configuration falls outside the model class (e.g. a jump
    /// chain that cycles inside its own jump set and never exits).
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),

    #[error("linear solver breakdown: {0}")]
    SolverBreakdown(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
