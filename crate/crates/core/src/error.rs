use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulation engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or parameter layouts that do not line up.
    #[error("structural error: {0}")]
    Structural(String),

    /// A numeric argument outside its admissible range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Input data that violates an operation's precondition.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration, detected at construction time.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("partition error: {0}")]
    Partition(String),

    /// Malformed file contents. `location` is a byte offset or a line number,
    /// depending on the format.
    #[error("format error in {path}: {message} (at {location})")]
    Format {
        path: PathBuf,
        location: String,
        message: String,
    },

    /// Gradient check found a non-finite loss.
    #[error("gradient check failed at coordinate {coordinate}: {message}")]
    GradCheck { coordinate: usize, message: String },

    #[error("round {round} failed: {message}")]
    Round { round: usize, message: String },

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        path: impl Into<PathBuf>,
        location: impl ToString,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            location: location.to_string(),
            message: message.into(),
        }
    }
}
