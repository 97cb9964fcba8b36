//! Crate-wide error type.

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("bad magic bytes: not a feature container")]
    BadMagic,
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("malformed metadata: {0}")]
    MalformedMetadata(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("run lengths sum to {got}, expected {expected}")]
    LengthMismatch { expected: u64, got: u64 },
    #[error("bad format: {0}")]
    BadFormat(String),
    #[error("illegal label value {0}: expected 0, 1, or 255")]
    IllegalLabelValue(u8),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty feature vector")]
    EmptyFeature,
    #[error("zero-norm reference row at index {0}")]
    ZeroNormRow(usize),
    #[error("too few points: {n} available, {k} required")]
    TooFewPoints { n: usize, k: usize },
    #[error("k = {k} outside valid range 1..={n}")]
    KTooLarge { k: usize, n: usize },
    #[error("empty reference set")]
    EmptyReferenceSet,
    #[error("zero-norm query vector")]
    ZeroQueryVector,
    #[error("empty batch")]
    EmptyBatch,
    #[error("training data must contain at least 2 rows")]
    EmptyData,
    #[error("estimator kind mismatch: {0}")]
    KindMismatch(String),
    #[error("no decision for segment ({image_id}, {segment_id})")]
    MissingDecision { image_id: u32, segment_id: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing ground truth for image {0}")]
    MissingGroundTruth(u32),
    #[error("unknown scenario: {0}")]
    UnknownScenario(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures of numeric origin (as opposed to bad inputs or IO).
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}
