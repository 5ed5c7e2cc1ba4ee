//! Error taxonomy shared by every module in the engine.
//!
//! The variants map one-to-one onto the process exit codes used by the CLI:
//! configuration problems (2), data/format problems (3), and numerical
//! divergence during training or sampling (4).

use thiserror::Error;

/// Unified error type for the engine.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Shapes or sizes that cannot be reconciled (odd dims for a wavelet
    /// transform, mismatched tensors, non-divisible downsampling factor...).
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar argument outside its documented domain.
    #[error("argument error: {0}")]
    Argument(String),

    /// Malformed serialized artifacts (grid files, coefficient files,
    /// checkpoints).
    #[error("format error: {0}")]
    Format(String),

    /// Inconsistent run configuration (transform level vs dims, missing
    /// paths, checkpoint/config mismatch).
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite numbers produced mid-computation; reports where.
    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
