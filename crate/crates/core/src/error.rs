use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("agent {agent} has non-positive utility {utility:e} and positive weight")]
    NonpositiveUtility { agent: usize, utility: f64 },

    #[error("total budget is zero")]
    ZeroBudget,

    /// The agent can not reach positive utility, so the log objective is unbounded.
    #[error("agent {agent} cannot attain positive utility")]
    Infeasible { agent: usize },

    #[error("solver did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("problem size {size} exceeds the limit {limit} of this routine")]
    DimensionTooLarge { size: usize, limit: usize },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("agent {agent} has zero weight")]
    DegenerateWeights { agent: usize },

    #[error("cache does not match the parameters or input it is used with")]
    StaleCache,

    #[error("mechanism does not support this operation: {0}")]
    UnsupportedMechanism(String),

    #[error("gave up after {attempts} rejected samples")]
    ResampleLimitExceeded { attempts: usize },

    #[error("{failed} of {total} samples failed, above the allowed fraction")]
    TooManyFailures { failed: usize, total: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("io: {0}")]
    Io(String),

    #[error("parse: {0}")]
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

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
