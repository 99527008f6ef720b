use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("anchor span {start}..{end} rejected: {reason}")]
    AnchorSpan {
        start: usize,
        end: usize,
        reason: &'static str,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: String, detail: String },

    #[error("{what} format version mismatch: expected {expected}, found {found}")]
    Version {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("unknown entry id {0}")]
    UnknownEntry(u64),

    #[error("images reference missing documents: {0:?}")]
    DanglingDoc(Vec<String>),

    #[error("label {label} out of range for a label set of size {size}")]
    LabelOutOfRange { label: usize, size: usize },

    #[error("non-finite loss at epoch {epoch}, example {example}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        example: usize,
        detail: String,
    },

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    /// Stable machine-readable code for the error category.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "E_IO",
            Error::InvalidInput(_) => "E_INPUT",
            Error::AnchorSpan { .. } => "E_ANCHOR",
            Error::Format { .. } => "E_FORMAT",
            Error::Version { .. } => "E_VERSION",
            Error::Dimension { .. } => "E_DIMENSION",
            Error::UnknownEntry(_) => "E_UNKNOWN_ENTRY",
            Error::DanglingDoc(_) => "E_DANGLING_DOC",
            Error::LabelOutOfRange { .. } => "E_LABEL",
            Error::NonFiniteLoss { .. } => "E_NONFINITE",
            Error::Checksum(_) => "E_CHECKSUM",
            Error::Config(_) => "E_CONFIG",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.into(),
            detail: detail.into(),
        }
    }
}
