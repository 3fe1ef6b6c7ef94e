use std::path::PathBuf;

/// Errors raised anywhere in the engine, model, pipeline or file formats.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for rank-{rank} tensor in {op}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("empty loss support in {0}: mask has no nonzero entries")]
    EmptyMask(&'static str),
    #[error("attention query row {row} is fully masked")]
    FullyMaskedRow { row: usize },
    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid corpus: {0}")]
    Corpus(String),
    #[error("non-finite loss at step {step}; batch utterances {utt_ids:?}")]
    NonFiniteLoss { step: u64, utt_ids: Vec<String> },
    #[error("bad file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated file {0}")]
    Truncated(PathBuf),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dim {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
