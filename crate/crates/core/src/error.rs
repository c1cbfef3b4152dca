use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode raster {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("unsupported raster format in {path}: {format}")]
    UnsupportedFormat { path: PathBuf, format: String },
    #[error("raster has a zero dimension ({width}x{height})")]
    ZeroDimension { width: usize, height: usize },
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("crop of {size} px exceeds image of {width}x{height}")]
    CropTooLarge {
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("raster dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("overlap mask is empty")]
    EmptyOverlap,
    #[error("correlation undefined: zero variance on the overlap mask")]
    UndefinedCorrelation,
    #[error("orientation neighborhood around ({x}, {y}) at scale {scale} leaves the image")]
    NeighborhoodOutside { x: usize, y: usize, scale: usize },
    #[error("invalid extractor config: {0}")]
    InvalidConfig(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no non-zero descriptors to cluster")]
    NoDescriptors,
    #[error("histogram length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("vocabulary tag `{vocab}` does not match repository tag `{repo}`")]
    TagMismatch { vocab: String, repo: String },
    #[error("empty repository")]
    EmptyRepository,
    #[error("duplicate image id `{0}`")]
    DuplicateId(String),
    #[error("no ground truth for query `{0}`")]
    MissingTruth(String),
    #[error("image `{0}` not found")]
    UnknownImage(String),
    #[error("patch of {patch} px exceeds image of {width}x{height}")]
    PatchTooLarge {
        patch: usize,
        width: usize,
        height: usize,
    },
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("space `{space}` at {root}: {message}")]
    Space {
        space: String,
        root: PathBuf,
        message: String,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            message: message.into(),
        }
    }

    /// True for errors caused by caller-supplied parameters rather than data.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_) | Error::InvalidArgument(_) | Error::Manifest(_)
        )
    }
}
