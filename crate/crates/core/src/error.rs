use thiserror::Error;

/// Errors raised by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("degenerate bandwidth: {0}")]
    DegenerateBandwidth(String),

    /// Round-off drove a quantity outside its admissible range by more than
    /// the allowed tolerance (negative squared norm, non-PSD table, ...).
    #[error("numerical integrity: {0}")]
    NumericalIntegrity(String),

    /// A closed form was evaluated at a state where it is undefined.
    #[error("degenerate state: {0}")]
    DegenerateState(String),

    /// An iterative routine hit its iteration cap.
    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}
