use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version {found:?} is not supported (expected {expected:?})")]
    Version { found: String, expected: String },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("checkpoint length error: {0}")]
    Length(String),

    #[error("checkpoint tensor {name:?} has shape {found:?}, expected {expected:?}")]
    TensorShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("unknown tensor {name:?}; expected one of {expected:?}")]
    UnknownTensor { name: String, expected: Vec<String> },

    #[error("transfer failed at tensor {tensor:?}: {reason}")]
    Transfer { tensor: String, reason: String },

    #[error("training diverged at step {step} (last good step {last_good})")]
    Diverged { step: u64, last_good: u64 },

    #[error("stage {stage} failed: {source} (artifacts in {artifacts})")]
    Stage {
        stage: String,
        artifacts: PathBuf,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
