use thiserror::Error;

/// Errors raised across the identification and reduction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("integration blow-up at step {step}{}: state {state:?}", trajectory.map(|t| format!(" of trajectory {t}")).unwrap_or_default())]
    IntegrationBlowup {
        step: usize,
        trajectory: Option<usize>,
        state: Vec<f64>,
    },

    #[error("singular least-squares fit over terms [{}]", terms.join(", "))]
    SingularFit { terms: Vec<String> },

    #[error("numerical overflow in {0}")]
    NumericalOverflow(String),

    #[error("index {index} out of range (0..={max})")]
    OutOfRange { index: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unsupported checkpoint schema version: expected {expected}, found {found}")]
    SchemaVersion { expected: String, found: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(expected: usize, found: usize, context: impl Into<String>) -> Self {
        Error::DimensionMismatch {
            expected,
            found,
            context: context.into(),
        }
    }
}
