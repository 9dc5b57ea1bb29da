use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("conv1d: windows of width {width} with stride {stride} do not tile a signal of length {length} (remainder {remainder})")]
    Tiling {
        length: usize,
        width: usize,
        stride: usize,
        remainder: usize,
    },

    #[error("label {label} at index {index} is out of range for {classes} classes")]
    Label { index: usize, label: usize, classes: usize },

    #[error("backward requires a scalar root, got shape {0:?}")]
    Arity(Vec<usize>),

    #[error("optimizer: parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("curve of length {length} cannot be partitioned into blocks of {token_size} (remainder {remainder})")]
    Partition {
        length: usize,
        token_size: usize,
        remainder: usize,
    },

    #[error("position {pos} out of range for max_seq_length {max}")]
    Position { pos: usize, max: usize },

    #[error("sequence length {len} exceeds max_seq_length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("data: {0}")]
    Data(String),

    #[error("split: class {class} has only {count} samples (need at least 3)")]
    Split { class: usize, count: usize },

    #[error("pairing: need at least two classes, found {0}")]
    Pairing(usize),

    #[error("imbalance: class {class} requested {requested} samples but only {available} available")]
    Imbalance {
        class: usize,
        requested: usize,
        available: usize,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("task variant {variant} does not accept {input} input")]
    Variant { variant: String, input: &'static str },

    #[error("incompatible checkpoint: {0}")]
    Compatibility(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
