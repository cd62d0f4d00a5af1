use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("query of an empty associative memory")]
    EmptyMemory,

    #[error("empty sequence")]
    EmptySequence,

    #[error("backward already ran on this tape; re-run the forward pass")]
    BackwardConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty mesh")]
    EmptyMesh,

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },

    #[error("checksum failure: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("config mismatch: {detail}\n  checkpoint: {found}\n  expected:   {expected}")]
    ConfigMismatch {
        detail: String,
        expected: String,
        found: String,
    },

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("training aborted after {0} consecutive non-finite losses")]
    TrainingAborted(usize),

    #[error("unknown protocol {0:?}")]
    UnknownProtocol(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
