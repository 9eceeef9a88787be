use std::fmt;

use thiserror::Error;

/// Which of the two per-layer cache kinds an operation refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CacheKind {
    /// Key/value tensors.
    Kv,
    /// Hidden states entering a layer.
    E,
}

impl fmt::Display for CacheKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CacheKind::Kv => f.write_str("KV"),
            CacheKind::E => f.write_str("E"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("perturbation has {got} entries but the model has {expected} layers")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab_size})")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: usize,
    },

    #[error("sequence of {len} positions exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("cache miss: no {kind} cache for layer {layer}")]
    CacheMiss { layer: usize, kind: CacheKind },

    #[error("invalid recompute config: {0}")]
    InvalidRecomputeConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("payload of {bytes} bytes cannot fit in a store bounded at {capacity} bytes")]
    EvictionRefused { bytes: usize, capacity: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(origin: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            origin: origin.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
