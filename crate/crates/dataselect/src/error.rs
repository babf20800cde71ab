use std::path::PathBuf;

use dataselect_core::Error as CoreError;

/// Errors surfaced by commands; each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("missing artifact {path}; run `dataselect {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("{0}")]
    Core(#[from] CoreError),
    #[error("numeric check failed: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data { .. } | CliError::MissingArtifact { .. } | CliError::Io { .. } => 2,
            CliError::Numeric(_) => 3,
            CliError::Core(e) => match e {
                CoreError::SingularFactor { .. }
                | CoreError::SingularMatrix { .. }
                | CoreError::Degenerate(_)
                | CoreError::Diverged { .. } => 3,
                CoreError::ParameterCap { .. } => 1,
                _ => 2,
            },
        }
    }
}
