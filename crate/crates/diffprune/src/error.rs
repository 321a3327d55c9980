//! One error enum for the whole library.
//!
//! Every failure mode callers can hit is a distinct variant with enough
//! context to act on (which op, which key, which byte offset), so binaries
//! can print one useful line and tests can match on the variant.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ── tensor engine ──
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("backward root does not require grad")]
    RootWithoutGrad,
    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },

    // ── gates / reparameterization ──
    #[error("gate noise u[{index}] = {value} is outside the open interval (0, 1)")]
    NoiseOutOfRange { index: usize, value: f32 },
    #[error("stretch limits must satisfy l < 0 and r > 1, got l = {l}, r = {r}")]
    BadStretch { l: f64, r: f64 },
    #[error("{what}: expected length {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("segments do not tile the flat space: {reason}")]
    BadSpace { reason: String },
    #[error("group partition invalid: {reason}")]
    BadPartition { reason: String },
    #[error("non-head index {index} has no group assignment")]
    UngroupedIndex { index: usize },
    #[error("diff position {position} outside flat space of dimension {dim}")]
    PositionOutOfRange { position: u64, dim: u64 },
    #[error("diff positions not strictly ascending at entry {index}")]
    UnsortedPositions { index: usize },
    #[error("diff entry {index} stores a zero value")]
    StoredZero { index: usize },
    #[error("diff entry {index} stores a non-finite value")]
    StoredNonFinite { index: usize },
    #[error("incompatible parameter spaces: {detail}")]
    SpaceMismatch { detail: String },

    // ── codec ──
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u16, expected: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("flat dimension {dim} exceeds the u32 position range of the diff format")]
    DimensionTooLarge { dim: u64 },
    #[error("malformed file: {reason}")]
    Malformed { reason: String },

    // ── config ──
    #[error("unknown config key `{key}`")]
    UnknownKey { key: String },
    #[error("duplicate config key `{key}`")]
    DuplicateKey { key: String },
    #[error("config key `{key}`: {reason}")]
    BadValue { key: String, reason: String },

    // ── training ──
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
}
