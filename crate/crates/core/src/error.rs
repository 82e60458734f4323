use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are kept fine-grained where callers (or the CLI exit-code
/// mapping) need to distinguish failure modes, e.g. the IDX parser reports
/// bad magic, truncation and count mismatches separately.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data cannot support the requested computation (e.g. a zoo with
    /// a single class). Maps to exit code 3 in the CLI.
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("bad IDX magic: expected {expected:#010x}, found {found:#010x}")]
    IdxBadMagic { expected: u32, found: u32 },

    #[error("truncated IDX file: {0}")]
    IdxTruncated(String),

    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("malformed input file: {0}")]
    MalformedFile(String),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("missing weight file: {}", .0.display())]
    MissingWeights(PathBuf),

    #[error("weight file checksum mismatch for record {0}")]
    ChecksumMismatch(String),

    #[error("bad weight file: {0}")]
    BadWeightFile(String),

    #[error("feature schema mismatch: {0}")]
    SchemaMismatch(String),

    /// The epsilon cap rejected too many sampled configurations.
    #[error("epsilon cap unreachable: {0}")]
    EpsilonCapUnreachable(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
