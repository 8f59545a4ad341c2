use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the experiment harness.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] dcnet::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    ConfigParse(#[from] toml::de::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("training diverged at step {step}: {message}\n{dump}")]
    Diverged {
        step: usize,
        message: String,
        dump: String,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { path, source }
}
