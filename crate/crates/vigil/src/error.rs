use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type. CLI exit codes are derived from the variant:
/// usage errors map to 1, divergence to 3, everything else to 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no decodable image files under {0}")]
    EmptyIngest(PathBuf),

    #[error("need at least 3 distinct video ids to split, got {0}")]
    InsufficientVideos(usize),

    #[error("record {video_id}:{frame_index} already carries variant {variant}; augment expects orig-color input")]
    DoubleAugmentation {
        video_id: String,
        frame_index: usize,
        variant: String,
    },

    #[error("manifest parse error at line {line}: {message}")]
    ManifestParse { line: usize, message: String },

    #[error("batch index {index} out of range for split {split} ({available} batches)")]
    BatchOutOfRange {
        split: String,
        index: usize,
        available: usize,
    },

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("corrupt weights file {path}: {message}")]
    CorruptWeights { path: PathBuf, message: String },

    #[error("dimension mismatch in {path}: backbone produces embedding dim {expected}, head expects {actual}")]
    DimensionMismatch {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("empty split {0}: no records to work with")]
    EmptySplit(String),

    #[error("scene contamination: {0}")]
    Contamination(String),

    #[error("event metadata missing: {0}")]
    MetadataMissing(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {message}")]
    ImageDecode { path: PathBuf, message: String },

    #[error("refusing to overwrite {0} (pass --force to replace)")]
    WouldOverwrite(PathBuf),

    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
