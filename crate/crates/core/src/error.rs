use std::path::PathBuf;

use prefixrep_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown token id {id} (vocabulary size {vocab_size})")]
    UnknownToken { id: usize, vocab_size: usize },

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("sequence must start with the CLS token")]
    MissingCls,

    #[error("slot shape {got:?} does not match encoder (expected [*, {heads}, {head_dim}])")]
    SlotShape { got: Vec<usize>, heads: usize, head_dim: usize },

    #[error("prefix '{task}' was trained against a different encoder (fingerprint {found}, expected {expected})")]
    FingerprintMismatch { task: String, expected: String, found: String },

    #[error("unknown task '{0}'")]
    UnknownTask(String),

    #[error("task '{0}' already present")]
    DuplicateTask(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("checksum mismatch: file is corrupted")]
    Integrity,

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("non-finite loss {loss} at step {step} while training {context}")]
    NonFiniteLoss { context: String, step: usize, loss: f64 },

    #[error("frozen base parameters changed during {0}")]
    FrozenBaseMutated(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("{context}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
