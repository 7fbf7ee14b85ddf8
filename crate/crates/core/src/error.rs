use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point at camera depth {depth} lies behind the image plane")]
    BehindCamera { depth: f64 },

    #[error("nonpositive depth {value} at valid pixel ({row}, {col})")]
    NonPositiveDepth { row: usize, col: usize, value: f64 },

    #[error("requested {requested} samples from a cloud of {available} points")]
    NotEnoughPoints { requested: usize, available: usize },

    #[error("degenerate configuration: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("surface projection did not converge after {iterations} iterations")]
    ProjectionFailed { iterations: usize },

    #[error("iso-surface is empty")]
    EmptySurface,

    #[error("mesh is not watertight: {ambiguous} of {total} voxels have inconsistent ray parity")]
    NotWatertight { ambiguous: usize, total: usize },

    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("model is not trained: {0}")]
    Untrained(String),

    #[error("frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),

    #[error("stage conflict: {0}")]
    StageConflict(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
