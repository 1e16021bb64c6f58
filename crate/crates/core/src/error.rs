use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor extents disagree with what an operation needs.
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A configuration value is outside its legal range.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller violated an operation's preconditions.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Train/validation/test subject sets overlap.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A cross-validation fold failed; nothing was reported.
    #[error("fold (repeat {repeat}, test subject {test_subject}) failed: {source}")]
    Fold {
        repeat: usize,
        test_subject: u32,
        #[source]
        source: Box<Error>,
    },

    #[error("flow cache miss for clip {clip} (expected {path})")]
    CacheMiss { clip: String, path: PathBuf },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    /// The innermost cause, looking through fold wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Fold { source, .. } => source.root(),
            e => e,
        }
    }

    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
