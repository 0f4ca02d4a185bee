//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },

    #[error("eigendecomposition did not converge after {sweeps} sweeps")]
    NoConvergence { sweeps: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown symbol {symbol:?} at byte offset {offset}")]
    UnknownSymbol { symbol: String, offset: usize },

    #[error("role order violation at turn {index}: {detail}")]
    RoleOrder { index: usize, detail: String },

    #[error("layer {layer} out of range for model with {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },

    #[error("cache position gap at layer {layer}, head {head}: expected {expected}, got {got}")]
    CacheGap {
        layer: usize,
        head: usize,
        expected: usize,
        got: usize,
    },

    #[error("cache was produced by model {cache_model:?}, cannot use with model {model:?}")]
    CacheModelMismatch { cache_model: String, model: String },

    #[error("caches are not comparable: {0}")]
    IncomparableCaches(String),

    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated payload: needed {needed} more bytes")]
    Truncated { needed: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("degenerate contrast: prompt sides produce identical means")]
    DegenerateContrast,

    #[error("empty {0}")]
    EmptyInput(&'static str),

    #[error("planted spec is infeasible: {0}")]
    InfeasiblePlanted(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad input data or files (CLI exit code 3),
    /// as opposed to usage errors (2) or experiment failures (1).
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::InvalidArg(_))
    }
}
