use std::path::PathBuf;

/// Everything that can go wrong inside the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("expected a rank-4 tensor, got shape {0:?}")]
    NotRank4(Vec<usize>),

    #[error("divisibility violation: {0}")]
    Divisibility(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("backward already ran on this graph; record a new forward pass first")]
    DoubleBackward,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("truncated payload: {0}")]
    TruncatedPayload(String),

    #[error("unsupported variant: {0}")]
    Unsupported(String),

    #[error("unknown checkpoint version {found} (this build reads {expected})")]
    UnknownVersion { found: u32, expected: u32 },

    #[error("checkpoint tensor `{name}` has shape {found:?}, config expects {expected:?}")]
    CheckpointShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("malformed manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable short identifier, used as a prefix on diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) | Error::NotRank4(_) => "shape",
            Error::ChannelMismatch { .. } => "channels",
            Error::Divisibility(_) => "divisibility",
            Error::InvalidArgument(_) => "argument",
            Error::InvalidConfig(_) => "config",
            Error::NonFinite(_) => "non-finite",
            Error::DoubleBackward | Error::NonScalarLoss(_) | Error::MissingGradient(_) => {
                "autograd"
            }
            Error::Divergence { .. } => "divergence",
            Error::MalformedHeader(_) => "malformed-header",
            Error::TruncatedPayload(_) => "truncated",
            Error::Unsupported(_) => "unsupported",
            Error::UnknownVersion { .. } => "version",
            Error::CheckpointShape { .. } => "checkpoint-shape",
            Error::Manifest { .. } => "manifest",
            Error::EmptyDataset => "dataset",
            Error::Io { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
