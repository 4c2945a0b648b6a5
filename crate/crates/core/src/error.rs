use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("{op}: argument outside domain ({detail})")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("function is not deterministic under a fixed seed: {0}")]
    NonDeterministic(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing {kind} head for task {task}")]
    MissingHead { kind: &'static str, task: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("dataset schema violation: {0}")]
    Schema(String),

    #[error("record {index} in {split} split references task {found}, expected task {expected}")]
    DanglingTask {
        split: String,
        index: usize,
        found: usize,
        expected: usize,
    },

    #[error("record {index} in {split} split of task {task}: label {label} out of range for {classes} classes")]
    LabelOutOfRange {
        task: usize,
        split: String,
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("task {task} is missing its {split} split")]
    MissingSplit { task: usize, split: String },

    #[error(
        "record {index} in {split} split of task {task} has {found} features, expected {expected}"
    )]
    RaggedFeatures {
        task: usize,
        split: String,
        index: usize,
        found: usize,
        expected: usize,
    },

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::Schema(_)
        )
    }
}
