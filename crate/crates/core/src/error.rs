//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum Error {
    // --- image decoding / partitioning ---
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    UnsupportedMaxVal(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    TruncatedData { expected: usize, found: usize },
    #[error("trailing bytes after pixel data: {0}")]
    TrailingData(usize),
    #[error("image dimensions must be positive")]
    ZeroDimensions,
    #[error("image {width}x{height} too small for border margin {margin}")]
    ImageTooSmall { width: u32, height: u32, margin: u32 },
    #[error("position ({row}, {col}) closer than {radius} to an image edge")]
    OutOfBounds { row: u32, col: u32, radius: u32 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    // --- model ---
    #[error("invalid configuration: {0}")]
    ConfigError(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("bad model file: {0}")]
    FormatError(String),

    // --- codec / pipeline ---
    #[error("payload framing error: {0}")]
    FramingError(String),
    #[error("capacity exceeded: frame needs {needed} bits, image realises at most {available}")]
    CapacityExceeded { needed: usize, available: usize },
    #[error("key error: {0}")]
    KeyError(String),
    #[error("non-finite value encountered: {0}")]
    NumericalError(String),
}

pub type Result<T> = std::result::Result<T, Error>;
