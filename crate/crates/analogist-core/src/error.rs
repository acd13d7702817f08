//! Error type shared by every core module.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An input image, tensor, or argument is malformed (empty image, odd
    /// dimensions where even are required, indivisible sizes, ...).
    InvalidInput(String),
    /// A cell layout violates its invariants (B' not bottom-right, duplicate
    /// quadrant assignments).
    InvalidLayout(String),
    /// An attention feature-map resolution is unusable (odd or zero side).
    InvalidResolution { h: usize, w: usize },
    /// Two tensors or maps that must agree on shape do not.
    ShapeMismatch { expected: String, got: String },
    /// A configuration value is out of its legal range.
    InvalidConfig(String),
    /// A computation produced or received a non-finite value.
    NonFinite(String),
    /// Both direction vectors of the similarity metric must be nonzero.
    UndefinedDirection,
    /// A label glyph is not covered by the embedded annotation font.
    MissingGlyph(char),
    /// A requested record (attention dump, checkpoint tensor) is absent.
    NotFound(String),
    /// A sampling run exceeded its wall-clock budget and was aborted.
    Timeout(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {msg}"),
            Error::InvalidLayout(msg) => write!(f, "invalid layout: {msg}"),
            Error::InvalidResolution { h, w } => {
                write!(f, "invalid resolution {h}x{w}: both sides must be even and nonzero")
            }
            Error::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::UndefinedDirection => {
                write!(f, "direction similarity undefined: a delta vector has near-zero norm")
            }
            Error::MissingGlyph(c) => write!(f, "no glyph for {c:?} in the embedded font"),
            Error::NotFound(msg) => write!(f, "not found: {msg}"),
            Error::Timeout(msg) => write!(f, "timed out: {msg}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
