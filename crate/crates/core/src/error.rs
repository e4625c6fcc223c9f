use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised across the crate.
///
/// Each variant maps onto one of the process exit codes used by the CLI,
/// see [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("role error: expected {expected}, found {found}")]
    Role { expected: String, found: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("resolution error: query {query_id} references unknown {role} id {id:?}")]
    Resolution {
        query_id: String,
        role: String,
        id: String,
    },

    #[error("argument error: {0}")]
    Argument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("layout validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("size error: {0}")]
    Size(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Name of the subsystem the error originates from, used in CLI diagnostics.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Io { .. } | Error::Format(_) | Error::Data(_) | Error::Role { .. } => "store",
            Error::Resolution { .. } => "store",
            Error::Shape(_) => "engine",
            Error::Parse { .. } | Error::Validation(_) => "layout",
            Error::Argument(_) | Error::Config(_) => "config",
            Error::Protocol(_) => "metrics",
            Error::Size(_) => "synth",
        }
    }

    /// 2 = config error, 3 = data/format error, 4 = protocol error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) | Error::Size(_) => 2,
            Error::Io { .. }
            | Error::Format(_)
            | Error::Data(_)
            | Error::Role { .. }
            | Error::Shape(_)
            | Error::Resolution { .. }
            | Error::Parse { .. }
            | Error::Validation(_) => 3,
            Error::Protocol(_) => 4,
        }
    }
}
