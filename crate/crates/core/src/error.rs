use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("distribution not normalized: {0}")]
    NotNormalized(String),
    #[error("could not place {objects} objects on a {height}x{width} grid")]
    PlacementFailure { objects: usize, height: usize, width: usize },
    #[error("heatmap center ({x}, {y}) lies outside the grid")]
    CenterOutOfGrid { x: f64, y: f64 },
    #[error("bounding box {0:?} lies outside the grid")]
    BboxOutOfGrid([usize; 4]),
    #[error("sequence of {len} frames is too short for windows of {window}")]
    TooShort { len: usize, window: usize },
    #[error("sequence of {len} frames exceeds the limit of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("corrupt archive: {0}")]
    CorruptArchive(String),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
