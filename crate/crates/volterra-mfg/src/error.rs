use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("kernel evaluation produced a non-finite value at (t, s) = ({t}, {s})")]
    KernelEvaluation { t: f64, s: f64 },

    #[error(
        "resolvent series did not converge: last term sup-norm {last_term_sup:.3e} after \
         {terms} terms (analytic bound on the next term {bound:.3e} exceeds tol {tol:.3e})"
    )]
    NonConvergence {
        last_term_sup: f64,
        terms: usize,
        bound: f64,
        tol: f64,
    },

    #[error("fixed-point iteration stalled after {iterations} iterations (residual {residual:.3e} > tol {tol:.3e})")]
    IterationNotConverged {
        iterations: usize,
        residual: f64,
        tol: f64,
    },

    #[error("linear system is singular or too ill-conditioned{0}")]
    SingularSystem(String),

    #[error(
        "consistency solve satisfies the transformed equation but leaves residual \
         {residual:.3e} > tol {tol:.3e} in the original equation"
    )]
    NceInconsistency { residual: f64, tol: f64 },

    #[error("internal consistency violation: {0}")]
    InternalConsistency(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
