use thiserror::Error;

/// Errors produced by the tracker library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate warp: scale {0} is not invertible")]
    DegenerateWarp(f64),

    #[error("patch out of frame: {outside} of {total} samples fall outside the frame")]
    PatchOutOfFrame { outside: usize, total: usize },

    #[error("degenerate template: {0}")]
    DegenerateTemplate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("weight load error: {0}")]
    WeightLoad(String),

    #[error("tensor store format error at entry `{entry}`: {reason}")]
    Format { entry: String, reason: String },

    #[error("occlusion undefined: the patch has no valid pixels")]
    UndefinedOcclusion,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("training diverged: non-finite loss at {stage} {index}")]
    Divergence { stage: &'static str, index: usize },

    #[error("insufficient history: need {needed} confident frames, have {have}")]
    InsufficientHistory { needed: usize, have: usize },

    #[error("uncontrollable: every singular value of the interaction matrix is below {cutoff:e}")]
    Uncontrollable { cutoff: f64 },

    #[error("scenario error at frame {frame}: {reason}")]
    Scenario { frame: usize, reason: String },

    #[error("ingestion error at row {row}: {reason}")]
    Ingestion { row: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
