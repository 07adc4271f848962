use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the crowding pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// Inconsistent shapes, schedules or settings.
    #[error("configuration error: {0}")]
    Config(String),
    /// Well-formed input whose content is unusable (label range, counts, sizes).
    #[error("data error: {0}")]
    Data(String),
    /// Malformed file contents.
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    /// A glyph box that does not fit on the canvas.
    #[error("placement error: {0}")]
    Placement(String),
    /// Training produced a NaN/Inf loss or gradient.
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
