use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Parse,
    Validation,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{module}: i/o error on {path}: {source}")]
    Io {
        module: &'static str,
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{module}: parse error at row {row}, column {column}: {message}")]
    Parse {
        module: &'static str,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("{module}: {message}")]
    Validation {
        module: &'static str,
        message: String,
    },

    #[error("{module}: dimension mismatch: {message}")]
    Dimension {
        module: &'static str,
        message: String,
    },

    #[error("{module}: matrix is rank deficient: {message}")]
    RankDeficient {
        module: &'static str,
        message: String,
    },

    #[error("{module}: matrix is not positive definite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite {
        module: &'static str,
        min_eigenvalue: f64,
    },

    #[error("{module}: numerical failure: {message}")]
    Numerical {
        module: &'static str,
        message: String,
    },
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } => ErrorKind::Io,
            Error::Parse { .. } => ErrorKind::Parse,
            Error::Validation { .. } | Error::Dimension { .. } => ErrorKind::Validation,
            Error::RankDeficient { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::Numerical { .. } => ErrorKind::Numerical,
        }
    }

    pub(crate) fn validation(module: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn dimension(module: &'static str, message: impl Into<String>) -> Self {
        Error::Dimension {
            module,
            message: message.into(),
        }
    }

    pub(crate) fn numerical(module: &'static str, message: impl Into<String>) -> Self {
        Error::Numerical {
            module,
            message: message.into(),
        }
    }
}
