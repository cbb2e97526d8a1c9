//! Crate-wide error type.
//!
//! Convention: low-level tensor/graph operations treat shape or precondition
//! violations as programmer errors and panic via `assert!` with a descriptive
//! message. Public module operations (dataset generation, training,
//! descriptor extraction, scoring, evaluation, I/O) return `Result<T, Error>`.

use std::path::PathBuf;

/// All recoverable failures surfaced by the public API.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Underlying file or directory I/O failed.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An image file could not be decoded or encoded.
    #[error("image codec error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    /// A configuration value is out of its documented range.
    #[error("invalid config: {0}")]
    Config(String),

    /// Input data violates a documented precondition (sizes, counts, tags).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A stored artifact (model file, manifest, score file) is malformed.
    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    /// Two descriptors with different parameterizations were compared.
    #[error("descriptor mismatch: {0}")]
    DescriptorMismatch(String),

    /// Training diverged (NaN/Inf loss); carries a diagnostic snapshot.
    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Diverged {
        epoch: usize,
        step: usize,
        message: String,
    },

    /// A pipeline stage was invoked before the stage that produces its input.
    #[error("missing input for `{stage}`: {path} not found; run `{hint}` first")]
    MissingStageInput {
        stage: String,
        path: PathBuf,
        hint: String,
    },
}

impl Error {
    /// Attach a path to a raw `std::io::Error`.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Shorthand for a malformed-file error.
    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
