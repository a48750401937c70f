//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, EmberError>;

#[derive(Debug, Error)]
pub enum EmberError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid groups: {0}")]
    InvalidGroups(String),

    #[error("quantization params missing for I8 cast")]
    MissingQuantParams,

    #[error("invalid quantization params: {0}")]
    InvalidQuantParams(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("tap `{0}` is not defined in the graph")]
    TapMissing(String),

    #[error("calibration stats missing for layer `{0}`")]
    MissingStats(String),

    #[error("empty calibration set")]
    EmptyCalibrationSet,

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("label out of range: {0}")]
    LabelOutOfRange(String),

    #[error("empty dataset split: {0}")]
    EmptySplit(String),

    #[error("double free of allocation handle {0}")]
    DoubleFree(u64),

    #[error("inference failed: {0}")]
    InferenceFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
