use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("schema mismatch: metadata is missing field `{field}`")]
    SchemaMismatch { field: String },

    #[error("schema mismatch: {0}")]
    SchemaConflict(String),

    #[error("training diverged at epoch {epoch} ({phase})")]
    Divergence { phase: String, epoch: usize },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("run `{run}` failed during {phase}: {source}")]
    Run {
        run: String,
        phase: String,
        #[source]
        source: Box<Error>,
    },

    #[error("output directory is locked by another invocation: {}", .0.display())]
    Locked(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input (missing or malformed files,
    /// flags, configs) rather than failures while running.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Run { source, .. } => return source.is_input_error(),
            Error::Io { source, .. } => return source.kind() == std::io::ErrorKind::NotFound,
            _ => {}
        }
        matches!(
            self,
            Error::InvalidInput(_)
                | Error::SchemaMismatch { .. }
                | Error::SchemaConflict(_)
                | Error::Parse { .. }
                | Error::Checkpoint(_)
        )
    }
}
