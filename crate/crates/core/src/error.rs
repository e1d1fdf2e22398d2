use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed RLE: counts sum to {sum}, expected {expected} for a {height}x{width} mask")]
    MalformedRle {
        sum: u64,
        expected: u64,
        height: usize,
        width: usize,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("class id {class_id} out of range 1..={num_classes}")]
    ClassOutOfRange { class_id: usize, num_classes: usize },

    #[error("no candidate proposals to sample from")]
    EmptyCandidates,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    Prerequisite(String),

    #[error("stale artifact: {0} (pass --allow-stale to proceed anyway)")]
    Stale(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("weak-supervision audit failed: {0}")]
    Audit(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Prerequisite(_) | Error::Stale(_) => 3,
            Error::Numerical(_) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
