use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("gradient tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed image {path}: {reason}")]
    ImageFormat { path: PathBuf, reason: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("box {bbox:?} exceeds {width}x{height} image{context}")]
    BoxOutOfBounds {
        bbox: [u32; 4],
        width: u32,
        height: u32,
        context: String,
    },

    #[error("model file has bad magic bytes")]
    BadMagic,

    #[error("unsupported model file version {0}")]
    UnsupportedVersion(u8),

    #[error("model file truncated: {0}")]
    Truncated(String),

    #[error("model file inconsistent with configuration: {0}")]
    ModelMismatch(String),

    #[error("no unmasked elements to average the loss over")]
    NoUnmaskedElements,

    #[error("unknown word id {0}")]
    UnknownWordId(usize),

    #[error("every thickness profile is empty; image unusable for voting")]
    UnusableImage,

    #[error("empty {0} split")]
    EmptySplit(&'static str),

    #[error("empty alpha grid")]
    EmptyGrid,

    #[error("prediction coverage mismatch: missing {missing:?}, extra {extra:?}")]
    Coverage { missing: Vec<String>, extra: Vec<String> },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code: 2 configuration/validation, 3 I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::MissingFile(_) => 3,
            Error::NonFiniteLoss { .. } | Error::NonFinite(_) => 4,
            _ => 2,
        }
    }
}
