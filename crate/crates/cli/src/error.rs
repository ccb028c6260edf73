use std::path::PathBuf;

use ppfm_core::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ppfm_core::Error),

    #[error("cli: i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cli: {0}")]
    Invalid(String),

    #[error("cli: malformed manifest {}: {source}", path.display())]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("cli: replay did not reproduce {} output(s): {}", .0.len(), .0.join(", "))]
    Mismatch(Vec<String>),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category label printed with the message.
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Io => "io",
                ErrorKind::Parse => "parse",
                ErrorKind::Validation => "validation",
                ErrorKind::Numerical => "numerical",
            },
            CliError::Io { .. } => "io",
            CliError::Invalid(_) | CliError::Manifest { .. } => "validation",
            CliError::Mismatch(_) => "replay",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "validation" | "parse" => 3,
            "numerical" => 4,
            "io" => 5,
            _ => 6,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
