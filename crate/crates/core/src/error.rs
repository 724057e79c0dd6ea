use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the matching engine and its I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("image too small: {height}x{width}, need at least {min}x{min}")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("pyramid too deep: level {level} would be {height}x{width}")]
    PyramidTooDeep { level: usize, height: usize, width: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes (expected \"GCMF\")")]
    BadMagic,

    #[error("unsupported GCMF version {0}")]
    BadVersion(u32),

    #[error("truncated file: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: u64, found: u64 },

    #[error("inconsistent pyramid sizes: {0}")]
    InconsistentSizes(String),

    #[error("non-finite value in level {level}")]
    NonFinite { level: usize },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("malformed image header: {0}")]
    MalformedHeader(String),

    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("channel mismatch: {0} vs {1}")]
    ChannelMismatch(usize, usize),

    #[error("empty search region")]
    EmptyRegion,

    #[error("coordinate ({row}, {col}) out of bounds for {height}x{width} map")]
    OutOfBounds { row: usize, col: usize, height: usize, width: usize },

    #[error("insufficient coarse matches: found {found}, need {required}")]
    InsufficientMatches { found: usize, required: usize },

    #[error("pyramid depth mismatch: {0} vs {1} levels")]
    DepthMismatch(usize, usize),

    #[error("degenerate point configuration")]
    DegenerateConfiguration,

    #[error("too few matches for homography estimation: {0} (need 4)")]
    TooFewMatches(usize),

    #[error("RANSAC found no consensus (best inlier count {0})")]
    NoConsensus(usize),

    #[error("singular homography")]
    SingularHomography,

    #[error("point maps to infinity")]
    PointAtInfinity,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed dataset: {0}")]
    MalformedDataset(String),

    #[error("{path}: malformed homography file: {reason}")]
    MalformedHomography { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures where the input was processed but matching degenerated,
    /// as opposed to bad input or I/O problems.
    pub fn is_matching_failure(&self) -> bool {
        matches!(
            self,
            Error::InsufficientMatches { .. }
                | Error::TooFewMatches(_)
                | Error::NoConsensus(_)
                | Error::DegenerateConfiguration
                | Error::SingularHomography
                | Error::PointAtInfinity
        )
    }
}
