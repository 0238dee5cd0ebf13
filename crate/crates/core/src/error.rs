use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    /// The control violates a hard constraint (forbidden region, budget).
    #[error("infeasible control: {0}")]
    Infeasible(String),

    #[error("ill-conditioned linear solve at step {step}: {detail}")]
    IllConditioned { step: usize, detail: String },

    #[error("no convergence after {iterations} iterations (last change {last_change:.3e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{path}: {message}")]
    Parse { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
