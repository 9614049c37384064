use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty geometry: {0}")]
    EmptyGeometry(String),

    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("non-manifold mesh: {0}")]
    NonManifold(String),

    #[error("iso-surface has no sign change")]
    NoSignChange,

    #[error("no occupied voxels after carving")]
    EmptyHull,

    #[error("no out-of-mask pixels to fit the environment from")]
    NoCoverage,

    #[error("all rays in the batch were depth-capped")]
    AllCapped,

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("config error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
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

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
