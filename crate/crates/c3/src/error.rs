use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code contract:
/// `Usage`/`Config`/`Spec` are operator mistakes (exit 2), the rest are
/// runtime failures (exit 1).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid corpus spec: {0}")]
    Spec(String),

    #[error("tokenizer: {0}")]
    Token(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGrad(String),

    #[error("training diverged (non-finite loss) at step {0}")]
    Diverged(u64),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint shape mismatch for `{name}`: file {file:?}, config {expected:?}")]
    CheckpointShape {
        name: String,
        file: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("truncated checkpoint file: {0}")]
    CheckpointTruncated(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("usage: {0}")]
    Usage(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code for the CLI surface: 2 for usage/config errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Spec(_) | Error::Usage(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
