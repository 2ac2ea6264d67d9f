use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("length mismatch: header implies {expected} bytes, file has {actual}")]
    LengthMismatch { expected: u64, actual: u64 },

    #[error("degenerate intensity range ({lo}, {hi})")]
    DegenerateRange { lo: f64, hi: f64 },

    #[error("crop {crop:?} exceeds volume shape {shape:?}")]
    CropTooLarge { crop: [usize; 3], shape: [usize; 3] },

    #[error("index {index} out of bounds for extent {extent}")]
    OutOfBounds { index: usize, extent: usize },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("label error: {0}")]
    Label(String),

    #[error("degenerate phantom: membrane fraction {fraction:.4} outside [0.02, 0.6]; try another seed")]
    DegeneratePhantom { fraction: f64 },

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{0} out of range")]
    Range(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("image encoding error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input or configuration, as
    /// opposed to failures while doing the work.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Diverged(_) | Error::Io { .. } | Error::Csv(_) | Error::Image(_)
        )
    }
}
