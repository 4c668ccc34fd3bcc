use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the tracking pipeline.
///
/// The CLI maps each variant to a process exit code through [`MatrError::exit_code`].
#[derive(Debug, Error)]
pub enum MatrError {
    #[error("config error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
}

impl MatrError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MatrError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for usage/config problems, 2 for data problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            MatrError::Config(_) => 1,
            MatrError::Input(_) | MatrError::Parse { .. } | MatrError::Io { .. } => 2,
            MatrError::Image { .. } => 2,
            MatrError::Numeric(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            MatrError::Config(_) => "config",
            MatrError::Input(_) => "input",
            MatrError::Parse { .. } => "parse",
            MatrError::Numeric(_) => "numeric",
            MatrError::Io { .. } => "io",
            MatrError::Image { .. } => "image",
        }
    }
}

pub type Result<T> = std::result::Result<T, MatrError>;
