//! Error types shared across the crate.

use thiserror::Error;

/// Errors from box construction and box-target encoding.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("box dimensions must be positive, got (l={l}, w={w}, h={h})")]
    NonPositiveDims { l: f64, w: f64, h: f64 },
    #[error("score must lie in [0, 1], got {0}")]
    ScoreOutOfRange(f64),
    #[error("box field {field} is not finite")]
    NonFinite { field: &'static str },
    #[error("anchor diagonal must be positive, got {0}")]
    DegenerateAnchor(f64),
}

/// Errors raised while recording or differentiating a tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutogradError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value detected in {context}")]
    NonFinite { context: String },
}

/// Configuration validation failures (bad ranges, missing files, malformed JSON).
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Invalid(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

/// Errors from dataset persistence and the label access guard.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed dataset file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error("ground-truth labels are withheld on this handle (training may not read target labels)")]
    LabelsWithheld,
    #[error("scene index {0} out of range")]
    SceneOutOfRange(usize),
}

/// Top-level pipeline failure, mapped to CLI exit codes.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("numerical abort at step {step}: {reason}")]
    Numerical { step: u64, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl PipelineError {
    /// CLI exit code: 2 for configuration problems, 3 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Dataset(_) => 2,
            PipelineError::Numerical { .. } | PipelineError::Autograd(_) => 3,
            _ => 2,
        }
    }
}
