use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the compression toolkit.
#[derive(Debug, Error)]
pub enum MiloError {
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("statistics error: {0}")]
    Stat(String),
    #[error("plan error: {0}")]
    Plan(String),
    #[error("config error: {0}")]
    Config(String),
}

impl MiloError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MiloError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable code, stable across releases.
    pub fn code(&self) -> &'static str {
        match self {
            MiloError::Format(_) => "FORMAT",
            MiloError::Data(_) => "DATA",
            MiloError::Io { .. } => "IO",
            MiloError::Shape(_) => "SHAPE",
            MiloError::Numeric(_) => "NUMERIC",
            MiloError::Rank(_) => "RANK",
            MiloError::Range(_) => "RANGE",
            MiloError::Stat(_) => "STAT",
            MiloError::Plan(_) => "PLAN",
            MiloError::Config(_) => "CONFIG",
        }
    }
}

pub type Result<T> = std::result::Result<T, MiloError>;
