use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("nside must be a positive power of two, got {0}")]
    InvalidNside(u64),

    #[error("pixel index {pix} out of range for nside {nside} ({n_pixels} pixels)")]
    PixelOutOfRange { pix: usize, nside: u32, n_pixels: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("resolution mismatch: expected nside {expected}, got {actual}")]
    ResolutionMismatch { expected: u32, actual: u32 },

    #[error("lmax {lmax} too large for nside {nside} (limit {limit})")]
    LmaxTooLarge { lmax: usize, nside: u32, limit: usize },

    #[error("power iteration did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },

    #[error("singular covariance: {0}")]
    Singular(String),

    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { value: f64, epoch: usize, step: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("malformed {kind} file {path}: {detail}")]
    Format { kind: &'static str, path: PathBuf, detail: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    /// True for errors caused by how the tool was invoked rather than by a
    /// failure while running. The binary maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Usage(_) | Error::Config(_) | Error::InvalidArgument(_) | Error::InvalidNside(_))
    }
}
