use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("singular matrix (|det| = {det:e})")]
    SingularMatrix { det: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("degenerate normalization: {0}")]
    DegenerateNormalization(String),

    #[error("empty white-matter mask")]
    EmptyMask,

    #[error("label {0} is not covered by the intensity parameters")]
    UnknownLabel(u32),

    #[error("class {0} has no voxels in any scan")]
    MissingClass(u32),

    #[error("trilinear interpolation is not defined for label maps")]
    TrilinearOnLabels,

    #[error("reference channel must not move (got {0})")]
    ReferenceMotion(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("non-finite values at stage `{stage}`")]
    NonFinite { stage: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("unsupported NIfTI layout: {0}")]
    UnsupportedLayout(String),

    #[error("truncated NIfTI payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
