use std::path::PathBuf;

/// Errors produced anywhere in the runtime.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite input")]
    NonFiniteInput,

    #[error("attention over an empty cache")]
    EmptyCache,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("prefill requires an empty cache")]
    CacheNotEmpty,

    #[error("token id {token} out of range for vocabulary of {vocab_size}")]
    InvalidToken { token: u32, vocab_size: usize },

    #[error("attention profile window is empty")]
    EmptyWindow,

    #[error("internal invariant violated: {0}")]
    InternalInvariantViolation(String),

    /// Raised by the per-step debug checks; carries the step for diagnostics.
    #[error("invariant violated at step {step}: {detail}")]
    InvariantViolation { step: usize, detail: String },

    #[error("trace mismatch: {0}")]
    TraceMismatch(String),

    #[error("oracle instance of {size} entries exceeds the enumeration bound of {max}")]
    InstanceTooLarge { size: usize, max: usize },

    #[error("empty trace or zero reference bytes")]
    EmptyTrace,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("malformed weight file: {0}")]
    WeightFormat(String),

    #[error("failed to parse {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors that indicate a broken invariant rather than bad input.
    pub fn is_invariant_violation(&self) -> bool {
        matches!(
            self,
            Error::InvariantViolation { .. } | Error::InternalInvariantViolation(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
