use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    /// Eigendecomposition failure, step underflow, norm growth and similar.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Observable requested on a state whose norm has decayed below the guard.
    #[error("undefined state: {0}")]
    UndefinedState(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code for the command-line runner: 2 for configuration
    /// problems, 3 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Json(_) => 2,
            Error::Numerical(_) | Error::Domain(_) | Error::UndefinedState(_) => 3,
            Error::Io(_) => 1,
        }
    }
}
