use std::path::PathBuf;

use crate::fields::Dims;

/// Errors produced by the library and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: Dims, right: Dims },

    #[error("data length {actual} does not match dims {dims} (expected {expected})")]
    LengthMismatch {
        dims: Dims,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("label {label} at index {index} outside [0, {num_classes})")]
    LabelOutOfRange {
        label: i64,
        index: usize,
        num_classes: usize,
    },

    #[error("class count mismatch: {left} vs {right}")]
    ClassMismatch { left: usize, right: usize },

    #[error("invalid probability mask at voxel {voxel}: {reason}")]
    InvalidProbMask { voxel: usize, reason: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("spectrum is not that of a real image: imaginary residue {residue:e} of norm {norm:e}")]
    ImaginaryResidue { residue: f64, norm: f64 },

    #[error("non-finite loss at {stage} (step {step}, level {level})")]
    Diverged {
        stage: &'static str,
        level: usize,
        step: usize,
        trace: Vec<f64>,
    },

    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: String },

    #[error("truncated payload: expected {expected} bytes after header at byte {offset}, found {actual}")]
    Truncated {
        offset: usize,
        expected: usize,
        actual: usize,
    },

    #[error("unexpected volume type at byte {offset}: expected {expected}, found {found}")]
    TypeMismatch {
        offset: usize,
        expected: String,
        found: String,
    },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("round {round}, stage {stage}: {source}")]
    Pipeline {
        round: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
