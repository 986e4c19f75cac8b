use std::path::PathBuf;

/// Errors raised across the crate.
///
/// Variants are grouped so that callers (the CLI in particular) can map them
/// onto process exit codes via [`Error::kind`].
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("volume format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported volume file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("no voxel above the foreground threshold")]
    EmptyForeground,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("phantom generation failed: {0}")]
    Generation(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("undefined distance: label {label} is empty in {which}")]
    UndefinedDistance { label: u8, which: &'static str },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite loss in {stage} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        stage: &'static str,
        epoch: usize,
        batch: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
}

/// Coarse classification used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    State,
    Runtime,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Argument(_) | Error::Config(_) => ErrorKind::Config,
            Error::State(_) | Error::Format { .. } | Error::Version { .. } | Error::Io { .. } => {
                ErrorKind::State
            }
            _ => ErrorKind::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
