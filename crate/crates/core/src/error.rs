use thiserror::Error;

/// Errors shared across the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("validation: {0}")]
    Validation(String),
    #[error("runtime guard: {0}")]
    Guard(String),
    #[error("not converged: {0}")]
    NotConverged(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Config(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
    pub fn guard(msg: impl Into<String>) -> Self {
        Error::Guard(msg.into())
    }

    /// Process exit code convention: 2 validation, 3 guard abort, 4 non-convergence, 1 other.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_) | Error::Config(_) => 2,
            Error::Guard(_) => 3,
            Error::NotConverged(_) => 4,
            Error::Io(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
