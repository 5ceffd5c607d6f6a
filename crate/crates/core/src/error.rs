use thiserror::Error;

/// Errors raised by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("Hilbert-space dimension {dim} exceeds the configured cap {cap}")]
    Capacity { dim: u128, cap: usize },

    #[error("site index {site} out of range for a chain of {num_sites} sites")]
    SiteOutOfRange { site: usize, num_sites: usize },

    #[error("basis mismatch: expected dimension {expected}, got {found}")]
    BasisMismatch { expected: usize, found: usize },

    #[error("operator is not Hermitian (max deviation {deviation:e})")]
    NotHermitian { deviation: f64 },

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("eigensolver failure: {0}")]
    Eigensolver(String),

    #[error("degenerate ground state: gap {gap:e} below {tolerance:e}")]
    DegenerateGroundState { gap: f64, tolerance: f64 },

    #[error("spectral span is zero; cannot rescale")]
    ZeroSpan,

    #[error("commutation check failed for {what}: norm {norm:e}")]
    Commutation { what: String, norm: f64 },

    #[error("quadrature did not converge for {quantity}: relative change {change:e}")]
    Quadrature { quantity: String, change: f64 },

    #[error("band solver failed at quasi-momentum {momentum}: {reason}")]
    BandSolver { momentum: f64, reason: String },

    #[error("state norm collapsed to {norm:e} at step {step}; reduce dt")]
    NormCollapse { norm: f64, step: usize },

    #[error("non-finite value encountered at step {step}")]
    NonFinite { step: usize },

    #[error("normalization error: {0}")]
    Normalization(String),

    #[error("empty averaging window")]
    EmptyWindow,

    #[error("observable `{0}` was not logged")]
    MissingObservable(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
