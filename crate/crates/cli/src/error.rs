use contraction_observer::Error;
use thiserror::Error as ThisError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_THRESHOLD: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

#[derive(Debug, ThisError)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
    /// A run that completed but missed its acceptance threshold.
    #[error("threshold not met: {0}")]
    Threshold(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Threshold(_) => EXIT_THRESHOLD,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io(_) => EXIT_IO,
            CliError::Format(_) => EXIT_FORMAT,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Config(_) => CliError::Config(msg),
            Error::Io(_) => CliError::Io(msg),
            Error::Format(_) => CliError::Format(msg),
            Error::Shape { .. } => CliError::Config(msg),
            Error::NonFinite { .. }
            | Error::NonFiniteValue(_)
            | Error::Precondition(_)
            | Error::UndefinedMetric(_)
            | Error::TrainingAborted { .. } => CliError::Numeric(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
