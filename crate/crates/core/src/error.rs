use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or hyperparameter violates an invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operand shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// An API was used out of order (e.g. a second backward on one tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// A gradient or parameter became NaN or infinite.
    #[error("non-finite gradient in layer `{0}`")]
    NonFinite(String),

    #[error("unsupported image format in {path}: {reason}")]
    UnsupportedImage { path: PathBuf, reason: String },

    #[error(transparent)]
    Load(#[from] LoadError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Failures while decoding a weight or checkpoint file.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum LoadError {
    #[error("bad magic bytes {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    UnknownVersion(u32),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("invalid embedded config: {0}")]
    BadConfig(String),

    #[error("tensor `{path}` has shape {found:?}, config expects {expected:?}")]
    ShapeMismatch {
        path: String,
        expected: [usize; 4],
        found: [usize; 4],
    },

    #[error("tensor `{0}` is not part of the configured model")]
    UnexpectedTensor(String),

    #[error("tensor `{0}` is missing")]
    MissingTensor(String),
}
