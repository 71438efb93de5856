use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes incompatible with the requested operation.
    #[error("{op}: dimension mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward value came out NaN or infinite.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    /// Caller broke an operation's preconditions.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid user-supplied input (too-short waveform, label out of range, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Bad configuration key or value.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary file (bad magic, truncated payload, ...).
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    /// File parsed but its contents contradict the expected model.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A checkpoint was written for a different model than the one requested.
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    /// Training loss became non-finite.
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
