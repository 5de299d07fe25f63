use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at row {row})")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("need at least 2 samples to estimate a covariance, got {0}")]
    DegenerateSampleCount(usize),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: {0}")]
    TruncatedFile(String),

    #[error("label {0} is absent from both datasets")]
    LabelAbsent(usize),

    #[error("bad parameter: {0}")]
    BadParameter(String),

    #[error("bad architecture: {0}")]
    BadArchitecture(String),

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bad format: {0}")]
    BadFormat(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("class {0} has no correctly classified training points")]
    EmptyClass(usize),

    #[error("bad percentiles alpha={alpha}, beta={beta}: need 0 <= alpha <= beta <= 100")]
    BadPercentiles { alpha: f64, beta: f64 },

    #[error("bad smoothstep thresholds: q_alpha={q_alpha} > q_beta={q_beta}")]
    BadThresholds { q_alpha: f64, q_beta: f64 },

    #[error("UQ model was fitted for a different network")]
    FingerprintMismatch,

    #[error("ensemble members {first} and {second} share seed {seed}")]
    BadSeeds { first: usize, second: usize, seed: u64 },

    #[error("ensemble member {member}: {source}")]
    Member {
        member: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("held-out label {label}, {method}: {source}")]
    Run {
        label: usize,
        method: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid config value for `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            key: key.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by the user's configuration rather than by the run itself.
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Parse(_) | Error::Validation { .. })
    }
}
