use thiserror::Error;

/// Result alias used throughout the engine.
pub type Result<T> = std::result::Result<T, CoreError>;

/// Errors emitted by the tensor engine, the gravity regularizer, the pruner
/// and the checkpoint codec.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("descriptor parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("shape mismatch in layer '{layer}': {msg}")]
    ShapeMismatch { layer: String, msg: String },

    #[error("invalid graph: {0}")]
    InvalidGraph(String),

    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("unsupported checkpoint version {found} (reader supports {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("checkpoint truncated at byte {offset}: {msg}")]
    CheckpointTruncated { offset: u64, msg: String },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("self-distance requested for filter index {index}")]
    SelfDistance { index: usize },

    #[error("gravity applied to empty layer '{layer}'")]
    EmptyLayer { layer: String },

    #[error("layer '{layer}' is not a prunable convolution")]
    NotPrunable { layer: String },

    #[error("pruning rate {0} outside [0, 1)")]
    InvalidRate(f64),

    #[error("keep-mask for layer '{layer}' has length {got}, expected {expected}")]
    MaskLenMismatch {
        layer: String,
        expected: usize,
        got: usize,
    },

    #[error("plan file error: {0}")]
    PlanFormat(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("invalid training setup: {0}")]
    InvalidTraining(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
