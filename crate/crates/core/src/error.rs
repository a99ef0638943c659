//! Error type shared across the crate.

/// Errors reported by constructors, operators and solvers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A point or parameter fell outside its documented domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two objects that must share a partition or dimension do not.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// Invalid construction parameters (breakpoints, weights, grids, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// An iterative scheme did not reach its tolerance within its budget.
    #[error("no convergence: {0}")]
    NoConvergence(String),

    /// The continuous branch of a fiberwise logarithm could not be tracked.
    #[error("branch jump: {0}")]
    BranchJump(String),

    /// A prediction was refused because the observable is lattice-valued.
    #[error("lattice observable: {0}")]
    Lattice(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
