//! Crate-wide error type.
//!
//! Variants are grouped by *what went wrong* rather than by module, so the
//! CLI can map them onto distinct exit-code classes (config vs data vs
//! numeric vs I/O) without inspecting message strings.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or argument values (bad hyper-parameter, shape
    /// request that cannot be built, unknown config key, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor/operation shape mismatches.
    #[error("shape error: {0}")]
    Shape(String),

    /// Numeric failures: NaN/Inf encountered, preconditions on value ranges
    /// violated, divergence during training.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Malformed data: manifests, datasets, label ranges, empty inputs.
    #[error("data error: {0}")]
    Data(String),

    /// Text-format parse failure with file/line context.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Binary-format failure (bad magic, unsupported version, truncation).
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    /// A pipeline phase was asked to run before the phase that produces its
    /// input artifact.
    #[error("missing artifact `{path}`: run the `{producer}` phase first")]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit-code class used by the CLI: config/usage problems, data problems,
    /// numeric failures, and I/O each get a distinct nonzero code.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_)
            | Error::Parse { .. }
            | Error::Format { .. }
            | Error::MissingArtifact { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Io { .. } => 5,
        }
    }
}
