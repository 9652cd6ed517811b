use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

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

    #[error("non-finite value in input to {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("unknown parameter key {0}")]
    UnknownParameter(String),

    #[error("unknown prune unit {0}")]
    UnknownUnit(String),

    #[error("invalid prune spec: {0}")]
    InvalidSpec(String),

    #[error("pruning ratio {ratio} unreachable: reached {reached:.4} before hitting {constraint}")]
    RatioUnreachable {
        ratio: f64,
        reached: f64,
        constraint: String,
    },

    #[error("plan does not match model: {0}")]
    PlanMismatch(String),

    #[error("scores missing for unit {0}")]
    MissingScore(String),

    #[error("empty group {0}")]
    EmptyGroup(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("class sets differ across domains: {0}")]
    AsymmetricClasses(String),

    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),

    #[error("attention record inconsistent with grid: {0}")]
    GridMismatch(String),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid experiment config:\n  {}", .0.join("\n  "))]
    InvalidExperiment(Vec<String>),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
