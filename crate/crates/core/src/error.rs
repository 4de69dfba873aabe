// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced by every module of the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("zero-norm vector in {0}")]
    ZeroNorm(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset needs both classes, found only label {0}")]
    SingleClass(u8),

    #[error("negative discriminant in lambda lower bound: epsilon_d too large for current state")]
    NegativeDiscriminant,

    /// The optimizer produced a non-finite state; the partial trace up to the failure is kept.
    #[error("optimizer diverged at step {step}")]
    Diverged {
        step: usize,
        trace: Box<crate::optimizer::OptimizerTrace>,
    },

    #[error("lambda {lambda} outside bounds at step {step}")]
    BoundViolation { step: usize, lambda: f64 },

    #[error("context overflow: {len} tokens exceeds context length {context}")]
    ContextOverflow { len: usize, context: usize },

    #[error("token {0} outside vocabulary")]
    OutOfVocab(String),

    #[error("missing override for layer {layer} position {position}")]
    MissingOverride { layer: usize, position: usize },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated record {0}")]
    TruncatedRecord(usize),

    #[error("truncated header")]
    TruncatedHeader,

    #[error("invalid enum value {value} for field {field} in record {record}")]
    InvalidEnum {
        field: &'static str,
        value: i64,
        record: usize,
    },

    #[error("generation failed at token {token}: {source}")]
    Generation {
        token: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
