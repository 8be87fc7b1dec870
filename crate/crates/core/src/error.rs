use std::path::PathBuf;

use tagv_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("srt line {line}: {msg}")]
    Srt { line: usize, msg: String },
    #[error("feature file: bad magic (expected TAGVFEAT)")]
    FeatMagic,
    #[error("feature file truncated: expected {expected} bytes, found {found}")]
    FeatTruncated { expected: usize, found: usize },
    #[error("feature file: non-finite value at flat index {index}")]
    FeatNonFinite { index: usize },
    #[error("feature file: {0} unexpected trailing bytes")]
    FeatTrailing(usize),
    #[error("checkpoint: bad magic (expected TAGVCKPT)")]
    CkptMagic,
    #[error("checkpoint: unsupported version {found} (this build reads {expected})")]
    CkptVersion { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    CkptTruncated(&'static str),
    #[error("checkpoint incompatible with configuration: {0}")]
    Incompatible(String),
    #[error("invalid data: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("subtitle track is empty")]
    EmptyTrack,
    #[error("{split} split is empty")]
    EmptySplit { split: String },
    #[error("question needs {needed} tokens but max_tokens is {max}")]
    QuestionTooLong { needed: usize, max: usize },
    #[error("token sequence has no subtitle tokens")]
    NoCueTokens,
    #[error("non-finite loss at step {step}: span {span}, highlight {hl}")]
    NonFiniteLoss { step: usize, span: f64, hl: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CoreError {
    let path = path.into();
    move |source| CoreError::Io { path, source }
}
