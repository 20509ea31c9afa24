use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("non-finite activation after decoder layer {layer}")]
    NonFinite { layer: usize },

    #[error("mask or kept-set size mismatch: expected {expected}, got {got}")]
    MaskLength { expected: usize, got: usize },

    #[error("layer {layer} out of range (model has {n_layers} layers)")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("no training requested")]
    NoTraining,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("checkpoint checksum mismatch: header says {stored:#018x}, blob hashes to {computed:#018x}")]
    Checksum { stored: u64, computed: u64 },

    #[error("checkpoint architecture mismatch: file has {found}, requested {expected}")]
    ArchMismatch { expected: String, found: String },

    #[error("retain ratio {0} outside [0, 1]")]
    InvalidRatio(f64),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("attention unavailable at layer {layer}")]
    AttentionUnavailable { layer: usize },

    #[error("label {label} outside vocabulary of size {vocab}")]
    LabelOutOfRange { label: u32, vocab: usize },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
