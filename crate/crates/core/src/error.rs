use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { len: usize, shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("invalid permutation {axes:?} for rank {rank}")]
    InvalidPermutation { axes: Vec<usize>, rank: usize },
    #[error("range {start}+{len} exceeds extent {extent} on axis {axis}")]
    OutOfBounds {
        axis: usize,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("concat of zero tensors")]
    EmptyConcat,
    #[error("softmax slice has no unmasked entry (degenerate mask)")]
    DegenerateMask,
    #[error("cannot normalize a slice with norm {norm:e}")]
    ZeroNorm { norm: f64 },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Problems with the embedding data itself.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("class {class} ({name}) has {available} training images, {required} required")]
    InsufficientSamples {
        class: usize,
        name: String,
        available: usize,
        required: usize,
    },
    #[error("episode has no training samples")]
    EmptyEpisode,
    #[error("stores are not comparable: {0}")]
    Mismatch(String),
    #[error("store invariant violated: {0}")]
    Invalid(String),
}

/// Everything that can abort a training or evaluation run.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("non-finite gradient in parameter {param}")]
    NonFiniteGradient { param: String },
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
}

pub(crate) fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}
