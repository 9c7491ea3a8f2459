use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{pool} pool exhausted: requested {requested} distinct entries, capacity is {capacity}")]
    PoolExhausted {
        pool: String,
        requested: u64,
        capacity: u64,
    },

    #[error("template pool for {kind} has {size} entries, at least {needed} are required")]
    TemplatePoolTooSmall {
        kind: String,
        size: usize,
        needed: usize,
    },

    #[error("invalid template for {kind} (line {line}): {reason}")]
    InvalidTemplate {
        kind: String,
        line: usize,
        reason: String,
    },

    #[error("invalid pool file {path}: {reason}")]
    InvalidPool { path: PathBuf, reason: String },

    #[error("out-of-vocabulary word {0:?}")]
    OutOfVocabulary(String),

    #[error("unknown token id {0}")]
    UnknownTokenId(u32),

    #[error("document {doc_index} has {len} tokens (with separator), exceeding seq_len {seq_len}")]
    DocumentTooLong {
        doc_index: u64,
        len: usize,
        seq_len: usize,
    },

    #[error("sequence of length {len} exceeds the context length {context_len}")]
    Overlength { len: usize, context_len: usize },

    #[error("loss mask excludes every position")]
    EmptyMask,

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("duplicate entity {0} in a document group")]
    DuplicateEntity(u32),

    #[error("attention span is empty")]
    EmptySpan,

    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownConfigKeys(Vec<String>),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("output directory {0} is not empty (use --force to overwrite)")]
    OutputNotEmpty(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure stems from user input (bad config, paths, flags)
    /// rather than an internal fault. Drives the CLI exit code.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::NonFiniteGradient(_) | Error::Json(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
