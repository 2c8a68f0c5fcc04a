use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Runtime {
        context: String,
        #[source]
        source: degm_core::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Runtime { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn runtime(context: impl Into<String>) -> impl FnOnce(degm_core::Error) -> Self {
        let context = context.into();
        move |source| CliError::Runtime { context, source }
    }

    /// Input-side failures (files, formats) map to data errors; the rest
    /// are runtime errors.
    pub(crate) fn classify(context: impl Into<String>) -> impl FnOnce(degm_core::Error) -> Self {
        let context = context.into();
        move |e| match e {
            degm_core::Error::BadMagic { .. }
            | degm_core::Error::Truncated { .. }
            | degm_core::Error::CountMismatch { .. }
            | degm_core::Error::Io { .. }
            | degm_core::Error::Checkpoint(_) => CliError::Data(format!("{context}: {e}")),
            source => CliError::Runtime { context, source },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
