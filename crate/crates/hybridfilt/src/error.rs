//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input: bad dimensions, parameter outside the admissible box,
    /// nonpositive step size, missing files, unparseable config.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A rate, drift or link function produced a non-finite value.
    #[error("model evaluation failed for transition {from}->{to} at y={y:?}: {what}")]
    ModelEval {
        from: usize,
        to: usize,
        y: Vec<f64>,
        what: String,
    },

    /// An observed jump has zero rate under the reference parameter while the
    /// candidate rate is positive: the two measures are not equivalent.
    #[error("singular likelihood: {0}")]
    SingularLikelihood(String),

    /// Sufficient statistics incompatible with any admissible parameter
    /// (observed transitions with zero occupation weight).
    #[error("singular statistics: {0}")]
    SingularStats(String),

    /// Discretization step too coarse for the requested operation.
    #[error("step too large: {0}")]
    StepTooLarge(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {what}")]
    Parse { path: String, what: String },
}

impl Error {
    /// Process exit code class: 1 for validation problems, 2 for numerical
    /// failures discovered mid-computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid(_) | Error::Io { .. } | Error::Parse { .. } => 1,
            Error::ModelEval { .. }
            | Error::SingularLikelihood(_)
            | Error::SingularStats(_)
            | Error::StepTooLarge(_) => 2,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
