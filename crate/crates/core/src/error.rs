use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::orchestrator::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A forward value became NaN or infinite outside of training.
    #[error("numeric failure: {0}")]
    NumericFailure(String),

    /// Training diverged (non-finite loss). Feeds backup-seed substitution.
    #[error("training failure: {0}")]
    TrainingFailure(String),

    /// A pre-registered invariant was violated; the run must abort.
    #[error("aborted: {0}")]
    Aborted(#[from] Violation),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}
