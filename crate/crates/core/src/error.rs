// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use crate::tensor::DType;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // tensor / autograd
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("dtype mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DTypeMismatch {
        op: &'static str,
        lhs: DType,
        rhs: DType,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("loss is not attached to any gradient tape")]
    NoTape,
    #[error("matrix is singular")]
    Singular,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // models
    #[error("invalid model schema: {0}")]
    InvalidSchema(String),
    #[error("sequence length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("unknown site {component}@{layer}")]
    UnknownSite { component: String, layer: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown token {0:?}")]
    UnknownToken(String),

    // interventions
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("subspace index {index} out of range for dimension {dim}")]
    SubspaceOutOfRange { index: usize, dim: usize },
    #[error("intervention kind {0:?} is already registered")]
    DuplicateName(String),
    #[error("unknown intervention kind {0:?}")]
    UnknownKind(String),

    // engine
    #[error("malformed config document: {0}")]
    MalformedDocument(String),
    #[error("serial intervention {index} reads a site upstream of intervention {prev}")]
    SerialOrderViolation { index: usize, prev: usize },
    #[error("unit locations have the wrong shape: {0}")]
    IndexShapeMismatch(String),
    #[error("intervention {0} needs a source but none was supplied")]
    MissingSource(usize),
    #[error("location {index} out of range for length {len}")]
    LocationOutOfRange { index: usize, len: usize },
    #[error("time step {step} out of range for {len} steps")]
    TimeStepOutOfRange { step: usize, len: usize },

    // serialization
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checksum mismatch for {0}")]
    ChecksumMismatch(String),
    #[error("schema digest mismatch: bundle {expected}, model {got}")]
    SchemaDigestMismatch { expected: String, got: String },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt tensor blob: {0}")]
    CorruptBlob(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
