use thiserror::Error;

/// Errors produced by the simulation, estimation and calibration routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} out of domain: got {value}")]
    Domain { what: &'static str, value: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("symplectic discriminant is negative ({0:e})")]
    NegativeDiscriminant(f64),

    #[error("{name} is not positive definite; Cholesky factorization failed")]
    NotPositiveDefinite { name: &'static str },

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("non-finite value in {block} samples at record {index}")]
    NonFinite { block: &'static str, index: usize },

    #[error("fit did not converge after {iterations} iterations (last parameters {params:?}, rss {rss:e})")]
    NoConvergence {
        iterations: usize,
        params: [f64; 3],
        rss: f64,
    },

    #[error("singular Jacobian in fit; try an initial guess closer to the data")]
    SingularJacobian,

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error came from bad user input rather than numerics or IO.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::Invalid(_) | Error::Domain { .. }
        )
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
