//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at line {line}: {detail}")]
    ParseLine { line: usize, detail: String },

    #[error("missing manifest header record")]
    MissingHeader,

    #[error("duplicate image_id `{0}`")]
    DuplicateImageId(String),

    #[error("invariant violated for `{image_id}`: {detail}")]
    Invariant { image_id: String, detail: String },

    #[error("label {label} out of range for {num_classes} classes (image `{image_id}`)")]
    LabelOutOfRange {
        image_id: String,
        label: usize,
        num_classes: usize,
    },

    #[error("value {value} out of range for {what}")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("unknown image_id `{0}`")]
    UnknownImageId(String),

    #[error("backend `{backend}` failed: {detail}")]
    Backend { backend: String, detail: String },

    #[error("missing required prompt field `{0}`")]
    MissingPromptField(&'static str),

    #[error("candidate `{0}` has no score")]
    UnscoredCandidate(String),

    #[error("eligible source pool is empty")]
    EmptyPool,

    #[error("poison count is zero (rate {rate} over {n_train} train entries)")]
    PoisonCountZero { rate: f64, n_train: usize },

    #[error("need {needed} selected candidates, only {have} available")]
    InsufficientCandidates { needed: usize, have: usize },

    #[error("clean-label mode requires generated candidate `{candidate_id}` to depict the target class (got `{subject}`)")]
    CleanModeNonTarget {
        candidate_id: String,
        subject: String,
    },

    #[error("evaluation set is empty")]
    EmptyEvalSet,

    #[error("poisoned entry `{0}` present in a clean evaluation set")]
    PoisonedEntryInCleanSet(String),

    #[error("clean entry `{0}` present in a poisoned evaluation set")]
    CleanEntryInPoisonedSet(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("loss became NaN at epoch {epoch}, step {step}")]
    NanLoss { epoch: usize, step: usize },

    #[error("config error at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("stage `{stage}` failed: {detail}")]
    Stage { stage: String, detail: String },

    #[error("artifact hash mismatch for {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("png error on {path}: {detail}")]
    Png { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn backend(backend: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Backend {
            backend: backend.into(),
            detail: detail.into(),
        }
    }

    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn stage(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            detail: detail.into(),
        }
    }

    /// True for errors caused by a bad configuration rather than a failing run.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
