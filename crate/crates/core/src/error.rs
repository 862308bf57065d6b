use std::path::PathBuf;

/// Errors produced by the crossview library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload shorter than header dims")]
    TruncatedPayload,
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("unsupported file extension: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported channel count {0} for PNG (expected 1, 3 or 4)")]
    UnsupportedChannels(usize),
    #[error("image codec error: {0}")]
    Image(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),
    #[error("unsupported operation: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
