use thiserror::Error;

/// Errors raised by tensor kernels, layers, and the optimizer.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("layer {index} ({kind}): {source}")]
    Layer {
        index: usize,
        kind: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_layer(self, index: usize, kind: &'static str) -> Error {
        Error::Layer {
            index,
            kind,
            source: Box::new(self),
        }
    }

    /// Innermost error, skipping layer annotations.
    pub fn root(&self) -> &Error {
        match self {
            Error::Layer { source, .. } => source.root(),
            other => other,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
