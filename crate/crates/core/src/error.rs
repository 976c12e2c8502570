use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("patch mask is not contained in focus mask at pixel (row {row}, col {col})")]
    MaskNotSubset { row: usize, col: usize },
    #[error("empty mask")]
    EmptyMask,
    #[error("box does not intersect the image")]
    EmptyIntersection,
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no detection of class {class_id} in the dataset")]
    NoTargets { class_id: u32 },
    #[error("nothing to evaluate: {0}")]
    NothingToEvaluate(String),
    #[error("training diverged (seed {seed}): {detail}")]
    Diverged { seed: u64, detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;
