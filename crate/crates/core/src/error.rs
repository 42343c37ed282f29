use std::path::PathBuf;

/// Errors produced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// NaN or infinity where finite values are required.
    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {what}: expected {expected}, found {found}")]
    Shape {
        what: String,
        expected: String,
        found: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed binary file. `offset` is the byte position where decoding failed.
    #[error("{path}: format error at byte {offset}: {message}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("dataset item `{item}`: {message}")]
    Load { item: String, message: String },

    #[error("image `{path}`: {message}")]
    Image { path: PathBuf, message: String },

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("training diverged at step {step}: total loss {loss}{}", .last_good.as_ref().map(|p| format!(" (last good checkpoint: {})", p.display())).unwrap_or_default())]
    Divergence {
        step: usize,
        loss: f64,
        last_good: Option<PathBuf>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        what: impl Into<String>,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
