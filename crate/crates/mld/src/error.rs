use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("backward requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimizer state mismatch: {detail}")]
    OptimMismatch { detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("truncated file {path}: {detail}")]
    Truncated { path: String, detail: String },

    #[error("unsupported format version {found} in {path} (max supported {max})")]
    VersionUnsupported { path: String, found: u32, max: u32 },

    #[error("corrupt tensor table in {path}: {detail}")]
    CorruptTable { path: String, detail: String },

    #[error("checkpoint incompatibility: {0}")]
    Incompatible(String),

    #[error("missing tensor {name} in checkpoint")]
    MissingTensor { name: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("missing embedding table entry for text {0:?}")]
    MissingTableEntry(String),

    #[error("condition not supported by the loaded embedder: {0}")]
    UnsupportedCondition(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
