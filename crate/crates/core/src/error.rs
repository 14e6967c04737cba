use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("label {label} at row {row} is outside [0, {num_classes})")]
    Label {
        row: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad checkpoint magic {0:?}, expected \"MTCK\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checkpoint record {index} is named {found:?}, expected {expected:?}")]
    RecordName {
        index: usize,
        expected: &'static str,
        found: String,
    },
    #[error("checkpoint tensor {name} has shape {found:?} but its config implies {expected:?}")]
    ShapeMismatch {
        name: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint config is invalid: {0}")]
    InvalidConfig(String),
    #[error("checkpoint tensor {0} holds non-finite values")]
    NonFinite(&'static str),
    #[error("checkpoint has {0} trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid label map: {0}")]
    LabelMap(String),
    #[error("unknown class(es): {}", .0.join(", "))]
    UnknownClass(Vec<String>),
    #[error("invalid url manifest: {0}")]
    UrlManifest(String),
    #[error("invalid corpus manifest: {0}")]
    Manifest(String),
    #[error("split error for class {class:?}: {reason}")]
    Split { class: String, reason: String },
    #[error("invalid split ratios: {0}")]
    Ratios(String),
    #[error("cannot load image {path}: {reason}")]
    Load { path: PathBuf, reason: String },
}

impl CorpusError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CorpusError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("timestamps must be strictly increasing; violated at frame {index}")]
    NonMonotone { index: usize },
    #[error("no frames found in {0}")]
    NoFrames(PathBuf),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("caption json error: {0}")]
    Json(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}
