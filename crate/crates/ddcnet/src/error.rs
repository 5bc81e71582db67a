use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/layer dimensions don't line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A value is outside the domain an operation is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Malformed text input (network spec files, config files, CSV).
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Malformed binary input (checkpoints, .flo files).
    #[error("{path}: invalid data at byte {offset}: {msg}")]
    BadData {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// The caller asked for something the API can't do in this state.
    #[error("usage error: {0}")]
    Usage(String),

    /// A gradient or parameter became NaN/inf during optimization.
    #[error("non-finite value in layer {layer} ({what})")]
    NonFinite { layer: u32, what: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
