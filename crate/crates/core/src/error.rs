use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed PGM header: {0}")]
    MalformedHeader(String),

    #[error("unsupported maxval {found} (expected {expected})")]
    UnsupportedMaxval { found: u32, expected: u32 },

    #[error("truncated PGM data: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },

    #[error("unknown ground-truth code {value} at row {row}, col {col}")]
    UnknownGtCode { value: u8, row: usize, col: usize },

    #[error("no depth frames found in {0}")]
    EmptySequence(PathBuf),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}{}", context_suffix(.context))]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
        context: String,
    },

    #[error("ground-truth count {gt} does not match frame count {frames}")]
    GtCountMismatch { frames: usize, gt: usize },

    #[error("sequence has no valid (nonzero) depth pixel")]
    NoValidDepth,

    #[error("sequence has no ground truth")]
    MissingGroundTruth,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty dataset: no labeled pixel to sample from")]
    EmptyDataset,

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("batch norm in train mode needs at least 2 samples per feature, got {0}")]
    BatchTooSmall(usize),

    #[error("odd spatial extent {0}x{1} for 2x2 max pooling")]
    OddPoolExtent(usize, usize),

    #[error("stale forward cache: parameters changed since the forward pass")]
    StaleCache,

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("precision mismatch: file stores {found}, expected {expected}")]
    PrecisionMismatch {
        found: &'static str,
        expected: &'static str,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(String),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    /// Stable short identifier of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedHeader(_) => "malformed-header",
            Error::UnsupportedMaxval { .. } => "unsupported-maxval",
            Error::TruncatedData { .. } => "truncated-data",
            Error::UnknownGtCode { .. } => "unknown-gt-code",
            Error::EmptySequence(_) => "empty-sequence",
            Error::DimensionMismatch { .. } => "dimension-mismatch",
            Error::GtCountMismatch { .. } => "gt-count-mismatch",
            Error::NoValidDepth => "no-valid-depth",
            Error::MissingGroundTruth => "missing-ground-truth",
            Error::InvalidConfig(_) => "invalid-config",
            Error::EmptyDataset => "empty-dataset",
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::BatchTooSmall(_) => "batch-too-small",
            Error::OddPoolExtent(..) => "odd-pool-extent",
            Error::StaleCache => "stale-cache",
            Error::Corrupt(_) => "corrupt",
            Error::BadMagic { .. } => "bad-magic",
            Error::VersionMismatch { .. } => "version-mismatch",
            Error::PrecisionMismatch { .. } => "precision-mismatch",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(
        expected: (usize, usize),
        found: (usize, usize),
        context: impl Into<String>,
    ) -> Self {
        Error::DimensionMismatch {
            expected,
            found,
            context: context.into(),
        }
    }
}
