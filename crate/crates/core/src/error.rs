use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    Dimension {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("conjugate gradient produced a non-finite iterate at iteration {iteration}")]
    CgBreakdown { iteration: usize },

    #[error("search direction has zero curvature (sAs = {0:e})")]
    ZeroCurvature(f64),

    #[error("inner maximization did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },

    #[error("environment does not support {0}; vine sampling needs state save/restore")]
    Unsupported(&'static str),

    #[error("{stage} failed at iteration {iteration}: {source}")]
    Stage {
        stage: &'static str,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn at_stage(self, stage: &'static str, iteration: usize) -> Self {
        Error::Stage {
            stage,
            iteration,
            source: Box::new(self),
        }
    }
}

impl Error {
    /// Sets the iteration on a stage error, or wraps any other error as one.
    pub fn with_iteration(self, iteration: usize) -> Self {
        match self {
            Error::Stage { stage, source, .. } => Error::Stage { stage, iteration, source },
            other => other.at_stage("iteration", iteration),
        }
    }

    /// True for errors caused by user configuration rather than a failed run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parse { .. })
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
