use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical blow-up on path {path} at grid index {index}")]
    NumericalBlowup { path: usize, index: usize },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("singular regression ({context}): condition number {condition:.3e}")]
    SingularRegression { context: String, condition: f64 },

    #[error("csv output failed: {0}")]
    Csv(#[from] csv::Error),

    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Attach a location (cell id, slice index, ...) to a singular regression.
    pub(crate) fn in_context(self, ctx: impl std::fmt::Display) -> Self {
        match self {
            Error::SingularRegression { context, condition } => Error::SingularRegression {
                context: format!("{ctx}: {context}"),
                condition,
            },
            other => other,
        }
    }
}
