use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("batch norm variance below zero")]
    NegativeVariance,
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid mask for layer {layer}: {reason}")]
    InvalidMask { layer: usize, reason: String },
    #[error("layer {0} would be left without any filter")]
    EmptyRemainingSet(usize),
    #[error("filter {filter} of layer {layer} has no damage samples")]
    MissingSamples { layer: usize, filter: usize },
    #[error("empty search space")]
    EmptySearchSpace,
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("malformed data file: {0}")]
    Format(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
