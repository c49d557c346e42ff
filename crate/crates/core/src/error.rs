use std::path::PathBuf;

use crate::truncation::ValidationReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed arguments outside an operation's contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// A coefficient evaluated to a non-finite value.
    #[error("non-finite {what} at coordinate {coord}")]
    NumericDomain { what: String, coord: usize },

    #[error("truncation policy rejected: {0}")]
    PolicyRejected(Box<ValidationReport>),

    /// The reference solver produced a non-finite state.
    #[error("reference solution blew up at step {step} of sample {sample}")]
    ReferenceBlowUp { sample: u64, step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
