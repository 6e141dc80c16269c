use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file did not parse under its declared format.
    #[error("{path}: line {line}, column {column}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    /// Input data violated a precondition (split sizes, window lengths, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A value outside the domain of a function (e.g. a probability of exactly 0).
    #[error("domain error: {0}")]
    Domain(String),

    /// A structural invariant was violated (e.g. a transform mask entry below the floor).
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Non-finite activations or losses.
    #[error("numerical error{}: {message}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Numerical {
        layer: Option<usize>,
        message: String,
        last_checkpoint: Option<PathBuf>,
    },

    /// Invalid experiment configuration; `key` is the dotted key path.
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// Checkpoint could not be decoded or has the wrong schema version.
    #[error("checkpoint schema error (expected {expected}, found {found}): {message}")]
    Schema {
        expected: String,
        found: String,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numerical(layer: Option<usize>, message: impl Into<String>) -> Self {
        Error::Numerical {
            layer,
            message: message.into(),
            last_checkpoint: None,
        }
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
