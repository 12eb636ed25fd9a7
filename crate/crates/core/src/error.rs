use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite {what} at collocation index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("non-finite {0}")]
    NonFiniteValue(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("training aborted at epoch {epoch}: {reason}")]
    TrainingAborted {
        epoch: usize,
        reason: String,
        /// Network as of the last finite parameter state.
        last_good: Box<crate::network::Mlp>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: usize, actual: usize) -> Self {
        Error::Shape {
            context,
            expected,
            actual,
        }
    }
}
