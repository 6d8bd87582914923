//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("conv1d: kernel length {kernel} exceeds input length {input}")]
    KernelTooLong { kernel: usize, input: usize },

    #[error("{op}: {msg}")]
    InvalidArg { op: &'static str, msg: String },

    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("batch contains a single class; metric needs at least two")]
    SingleClassBatch,

    #[error("non-finite loss at batch {batch}")]
    NonFiniteLoss { batch: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("wav decode: {0}")]
    Wav(#[from] WavError),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decode failures for the RIFF/WAVE reader. Each malformed input class
/// gets its own variant so callers can distinguish them.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum WavError {
    #[error("missing RIFF header")]
    NotRiff,
    #[error("missing WAVE tag")]
    NotWave,
    #[error("unsupported format code {0} (only PCM=1)")]
    UnsupportedFormat(u16),
    #[error("unsupported channel count {0} (only mono)")]
    UnsupportedChannels(u16),
    #[error("unsupported bit depth {0} (only 16-bit)")]
    UnsupportedBitDepth(u16),
    #[error("truncated {0} chunk")]
    Truncated(&'static str),
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file while reading {0}")]
    Truncated(&'static str),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("config fingerprint mismatch: checkpoint {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {name}: stored shape {stored:?} does not match model shape {expected:?}")]
    TensorShape {
        name: String,
        stored: Vec<usize>,
        expected: Vec<usize>,
    },
}
