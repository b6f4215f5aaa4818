use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {lhs:?}, right {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: output would be empty for input {input:?}, kernel {kernel:?}, stride {stride:?}, padding {padding:?}")]
    EmptyOutput {
        op: &'static str,
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("embedding dimension {0} is too small or cannot be split into sine/cosine pairs per axis (need D >= 6 and floor(D/3) even)")]
    BadEmbeddingDim(usize),

    #[error("unknown scale index {index}, model has {count} scales")]
    UnknownScale { index: usize, count: usize },

    #[error("input height/width must be divisible by 32, got {height}x{width}")]
    Indivisible { height: usize, width: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("clip {clip}: {message}")]
    BadClip { clip: String, message: String },

    #[error("malformed {format} header in {path}: {message}")]
    BadImage {
        format: &'static str,
        path: PathBuf,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    BadCheckpoint { path: PathBuf, message: String },

    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
