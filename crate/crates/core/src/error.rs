use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph already freed by a previous backward pass")]
    GraphFreed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}:{line}: malformed protocol line: {reason}")]
    Protocol { path: PathBuf, line: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("audio error on {path}: {source}")]
    Audio {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short category name used for CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::NonFinite(_) | Error::NotScalar(_) | Error::GraphFreed => {
                "compute"
            }
            Error::InvalidArgument(_) => "argument",
            Error::Metric(_) => "metric",
            Error::Data(_) | Error::Protocol { .. } | Error::Audio { .. } => "data",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code for the category.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "config" | "argument" => 2,
            "data" | "io" => 3,
            "checkpoint" => 4,
            "metric" => 5,
            _ => 1,
        }
    }
}
