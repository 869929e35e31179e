//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("{op} expects a scalar, got {numel} elements")]
    NotScalar { op: &'static str, numel: usize },

    #[error("degenerate rotation input: {0}")]
    DegenerateRotation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("diffusion step {t} out of range [1, {max}]")]
    StepOutOfRange { t: usize, max: usize },

    #[error("invalid skeleton: {0}")]
    Skeleton(String),

    #[error("BVH parse error at line {line}: {message}")]
    BvhParse { line: usize, message: String },

    #[error("invalid motion data: {0}")]
    MotionData(String),

    #[error("context length {len} out of range [1, {max}] (at most half the block size)")]
    ContextLength { len: usize, max: usize },

    #[error("non-finite value produced during {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset format error: {0}")]
    Dataset(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
