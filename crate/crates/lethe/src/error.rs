use thiserror::Error;

/// Crate-wide error type.
///
/// Variants are grouped roughly by subsystem; the CLI maps them onto exit
/// codes (config problems vs. missing artifacts vs. runtime failures).
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("computation record is malformed: {0}")]
    BadRecord(String),

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("sequence of length {len} exceeds maximum length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("layer index {layer} out of range (limit {limit})")]
    LayerOutOfRange { layer: usize, limit: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("corpus generation failed: {0}")]
    CorpusGeneration(String),

    #[error("subject tokens not found in prompt")]
    SubjectNotFound,

    #[error("degenerate edit: {0}")]
    DegenerateEdit(String),

    #[error("invalid objective: {0}")]
    InvalidObjective(String),

    #[error("invalid attack configuration: {0}")]
    InvalidAttack(String),

    #[error("invalid metric input: {0}")]
    InvalidMetric(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed file {path}: {detail}")]
    MalformedFile { path: String, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Helper for io errors that keeps the offending path in the message.
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
