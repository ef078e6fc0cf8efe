use thiserror::Error;

use crate::checkpoint::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("subdivision level {0} out of range (max {max})", max = crate::icosphere::MAX_LEVEL)]
    LevelOutOfRange(u32),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The analytic Jacobian is undefined here (ERP pole row, fisheye center).
    #[error("projection singularity: {0}")]
    Singular(&'static str),

    /// A pixel that maps to no sphere direction, or a direction outside the field of view.
    #[error("point outside the projection domain")]
    Outside,

    #[error("degenerate tangent frame: query point coincides with the reference vertex")]
    DegenerateFrame,

    #[error("non-finite loss at step {step} ({detail})")]
    NonFinite { step: usize, detail: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
