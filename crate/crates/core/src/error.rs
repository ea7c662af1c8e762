use std::path::PathBuf;

use crate::attributes::ATTRIBUTE_NAMES;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("image is {width}x{height}, smaller than the required {min}x{min}")]
    ImageTooSmall { width: usize, height: usize, min: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid attributes: {0}")]
    InvalidAttributes(String),
    #[error("unknown attribute `{0}`; the schema is: {schema}", schema = ATTRIBUTE_NAMES.join(", "))]
    UnknownAttribute(String),
    #[error("attribute `{0}` is missing from the attribute file header")]
    MissingAttributeColumn(String),
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("image for record `{id}` not found at {path}")]
    MissingImage { id: String, path: PathBuf },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage {0} is outside 1..=3")]
    InvalidStage(usize),
    #[error("non-finite value in loss component `{0}`")]
    NonFinite(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },
    #[error("feature extractor unavailable: {0}")]
    ExtractorUnavailable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Decode(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
