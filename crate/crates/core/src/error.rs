use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or presets that cannot describe a valid model.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad input data: labels, manifests, empty datasets.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed binary payload (PPM images, checkpoint archives).
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("numerical error: {0}")]
    Numerical(String),

    /// A check that a command promised to pass did not pass.
    #[error("acceptance failure: {0}")]
    Acceptance(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 1,
            Error::Data(_) | Error::Format { .. } | Error::Io { .. } => 2,
            Error::Numerical(_) | Error::Acceptance(_) => 3,
        }
    }
}
