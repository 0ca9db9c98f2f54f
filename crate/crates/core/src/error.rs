use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid argument: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("softmax: row {row} is fully masked")]
    AllMaskedRow { row: usize },

    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward: tape already consumed; call reset() before a second backward pass")]
    BackwardTwice,

    #[error("backward: tape is empty")]
    EmptyTape,

    #[error("finite difference check: function returned a non-finite value ({value})")]
    NonFinite { value: f64 },

    #[error("standardize: feature standard deviation below threshold at batch {batch}, position {position}")]
    DegenerateStd { batch: usize, position: usize },

    #[error("saliency: batch row {row} has {valid} non-padded tokens, need at least 2")]
    TooFewTokens { row: usize, valid: usize },

    #[error("span {span}: total token weight is zero")]
    ZeroSpanWeight { span: usize },

    #[error("span weights: all span masses are zero")]
    ZeroSpanMass,

    #[error("{what}: span count mismatch (student {student}, teacher {teacher})")]
    SpanCountMismatch {
        what: &'static str,
        student: usize,
        teacher: usize,
    },

    #[error("annotation {sample_id}: {msg}")]
    Annotation { sample_id: String, msg: String },

    #[error("layer schedule: {0}")]
    Schedule(String),

    #[error("layer {layer} not available (model has layers 0..={max})")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("{op}: no positions selected by mask")]
    EmptyMask { op: &'static str },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("config: {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("corrupt file {path:?} at byte {offset}: {msg}")]
    Corrupt {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
