//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by tensor math, model construction, training, profiling,
/// and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A numeric argument is outside its valid domain.
    #[error("parameter error: {0}")]
    Param(String),

    /// A model/architecture configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A layer id does not exist in the model.
    #[error("unknown layer: {0}")]
    UnknownLayer(String),

    /// The layer exists but cannot be targeted by this operation
    /// (e.g. randomizing a batchnorm layer).
    #[error("invalid target layer {layer}: {reason}")]
    Target { layer: String, reason: String },

    /// Two profiles (or a profile and a model) disagree on their layer sets.
    #[error("alignment error: {0}")]
    Alignment(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    /// A statistic is undefined for the given input (e.g. constant vector).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// File does not start with the expected magic bytes.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    /// File ends before the declared payload.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// File declares an unsupported format version.
    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    /// A stored label is outside [0, num_classes).
    #[error("label out of range: label {label} with {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: u32 },

    /// A tensor blob is not aligned as the format requires.
    #[error("misaligned blob for tensor {name}: offset {offset}")]
    MisalignedBlob { name: String, offset: u64 },

    /// Stored metadata is not parseable.
    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
