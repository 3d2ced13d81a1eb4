use std::io;
use std::path::{Path, PathBuf};

/// Failures surfaced by the command line, each mapped to a stable exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config files or input data.
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Input {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    /// Writing results failed (disk full, permissions).
    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Core(#[from] lkdn_core::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn input(path: &Path, source: io::Error) -> Self {
        CliError::Input {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn format(path: &Path, message: impl Into<String>) -> Self {
        CliError::Format {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    pub fn output(path: &Path, source: io::Error) -> Self {
        CliError::Output {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 0 success, 1 internal or numeric failure, 2 user or config error.
    pub fn exit_code(&self) -> i32 {
        use lkdn_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Input { .. } | CliError::Format { .. } => 2,
            CliError::Output { .. } => 1,
            CliError::Core(e) => match e {
                E::Config(_) | E::Usage(_) => 2,
                E::ShapeMismatch { .. }
                | E::MissingGradient(_)
                | E::NonFinite(_)
                | E::Fusion(_)
                | E::ScheduleExhausted { .. } => 1,
            },
        }
    }
}
