use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("incomplete source record: {0}")]
    IncompleteSourceRecord(String),
    #[error("gaze parse error in {file} at line {line}: {reason}")]
    GazeParse {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("bad image range: {0}")]
    BadImageRange(String),
    #[error("bad kernel width: sigma must be > 0, got {0}")]
    BadKernelWidth(f64),
    #[error("bad weight floor: must lie in (0, 1], got {0}")]
    BadWeightFloor(f64),
    #[error("bad weight mask: values must lie in (0, 1]")]
    BadWeightMask,
    #[error("shape not divisible by stride: {height}x{width} with stride {stride}")]
    ShapeNotDivisible {
        height: usize,
        width: usize,
        stride: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("token dim mismatch: {0}")]
    TokenDimMismatch(String),
    #[error("token count mismatch: {0} vs {1}")]
    TokenCountMismatch(usize, usize),
    #[error("depth too small: need depth >= 2, got {0}")]
    DepthTooSmall(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint integrity failure: {0}")]
    CheckpointIntegrity(String),
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("undefined surface distance: {0}")]
    UndefinedSurfaceDistance(&'static str),
    #[error("incomplete ablation set: missing {0}")]
    IncompleteAblationSet(String),
    #[error("degenerate shape config: {0}")]
    DegenerateShapeConfig(String),
    #[error("no structure to gaze at")]
    NoStructureToGazeAt,
    #[error("gaze required for adaptation: item {0}")]
    GazeRequired(String),
    #[error("no active objective: all loss weights are zero")]
    NoActiveObjective,
    #[error("image decode error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad user input rather than a failed computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::BadKernelWidth(_)
                | Error::BadWeightFloor(_)
                | Error::DepthTooSmall(_)
                | Error::NoActiveObjective
                | Error::DegenerateShapeConfig(_)
                | Error::ShapeNotDivisible { .. }
        )
    }
}
