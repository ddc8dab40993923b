use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange { axis: usize, shape: Vec<usize> },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("rows have unequal lengths")]
    Ragged,
    #[error("index {index} out of range for {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("concat needs at least one input")]
    EmptyConcat,
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {node} references later node {input}; graph is not acyclic")]
    CyclicGraph { node: usize, input: usize },
    #[error("backward already ran on this graph; reset gradients first")]
    AlreadyBackpropagated,
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
    #[error("invalid session: {0}")]
    Invalid(String),
    #[error("line {line}: invalid session: {message}")]
    Validation { line: usize, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported dataset format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("variant `{variant}` needs parameter `{param}`, which these parameters do not contain")]
    VariantMismatch { variant: String, param: String },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("manifest describes {manifest} floats but payload holds {payload}")]
    SizeMismatch { manifest: usize, payload: usize },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training dataset is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; first non-finite parameter: {param}")]
    NonFinite {
        epoch: usize,
        step: usize,
        param: String,
    },
    #[error("loss: {0}")]
    Loss(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("AUC undefined: need at least one positive and one negative label")]
    UndefinedAuc,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("no sessions to evaluate")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl From<TensorError> for EvalError {
    fn from(e: TensorError) -> Self {
        EvalError::Model(ModelError::Tensor(e))
    }
}
