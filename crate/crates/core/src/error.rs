use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("transform is singular (|det| = {det:e})")]
    SingularTransform { det: f64 },
    #[error("invalid transform: {0}")]
    InvalidTransform(String),
    #[error("image {width}x{height} is smaller than the descriptor stride {stride}")]
    ImageTooSmall { width: usize, height: usize, stride: usize },
    #[error("descriptor dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("point ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds { x: f64, y: f64, width: usize, height: usize },
    #[error("supervision mask removes every entry")]
    EmptySupervision,
    #[error("pair set is empty")]
    EmptyPairSet,
    #[error("unknown class `{0}`")]
    UnknownClass(String),
    #[error("unknown pair `{0}`")]
    UnknownPair(String),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("prediction and ground-truth lists differ in length ({pred} vs {gt})")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("no keypoints to evaluate")]
    EmptyKeypoints,
    #[error("pair `{0}` has no ground-truth keypoints")]
    MissingGroundTruth(String),
    #[error("severity {0} outside 1..=5")]
    InvalidSeverity(u8),
    #[error("unsupported corruption kind `{0}`")]
    UnsupportedKind(String),
    #[error("manifests do not align: {0}")]
    ManifestMismatch(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec failure on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }

    /// Whether the error stems from user-provided configuration rather than
    /// a runtime failure. The CLI maps these to exit status 2.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidSpec(_))
    }
}
