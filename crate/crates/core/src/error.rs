use std::path::PathBuf;

use thiserror::Error;

/// Every failure mode surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("vocabulary error: token id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },

    #[error("span error: span ({k}, {n}) does not fit a sequence of length {len}")]
    Span { k: usize, n: usize, len: usize },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("state error: {0}")]
    State(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("extraction error: {0}")]
    Extraction(String),

    #[error("split error: requested {requested} test records but only {available} were kept")]
    Split { requested: usize, available: usize },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("version error: {0}")]
    Version(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    ///
    /// 2 config, 3 data, 4 numeric; anything else counts as a data problem
    /// because it originates from the inputs handed to the command.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Plan(_) | Error::Version(_) => 2,
            Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}

pub(crate) fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}
