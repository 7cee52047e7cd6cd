use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth {0} (must be > 0)")]
    InvalidDepth(f64),
    #[error("pixel ({u}, {v}) outside {width}x{height} image")]
    OutOfBounds {
        u: f64,
        v: f64,
        width: usize,
        height: usize,
    },
    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),
    #[error("unknown plane id {0}")]
    UnknownPlane(u32),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss on ray {ray}: {detail}")]
    NonFiniteLoss { ray: usize, detail: String },
    #[error("semantic volume has no occupied voxels")]
    EmptyVolume,
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },
    #[error("bad file format in {path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("usage error: {0}")]
    Usage(String),
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
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            message: message.into(),
        }
    }
}
