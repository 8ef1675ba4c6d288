use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid resolution {0}: must be at least {min}", min = crate::resample::MIN_RESOLUTION)]
    InvalidResolution(usize),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A vector with zero norm cannot be turned into a direction.
    #[error("undefined direction: {0}")]
    UndefinedDirection(String),

    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate crop: {0}")]
    DegenerateCrop(String),

    #[error("non-finite gradient at restart {restart}, iteration {iteration} (loss {loss}, {bad} bad entries)")]
    NonFiniteGradient {
        restart: usize,
        iteration: usize,
        loss: f64,
        bad: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by the run configuration rather than by the computation.
    pub fn is_configuration(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidResolution(_))
    }
}
