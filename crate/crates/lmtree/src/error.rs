use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the layer that raises them;
/// file-format errors keep distinct kinds so callers can tell a malformed file
/// from a version or dimension problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("malformed {kind} file {path}: {detail}")]
    Format {
        kind: &'static str,
        path: String,
        detail: String,
    },

    #[error("unsupported {kind} version in {path}: found {found}, expected {expected}")]
    Version {
        kind: &'static str,
        path: String,
        found: String,
        expected: String,
    },

    #[error("unsupported activation '{0}' in weights file")]
    UnsupportedActivation(String),

    #[error("episode already terminated by contact")]
    Terminated,

    #[error("start pose is in contact with an obstacle")]
    StartInContact,

    #[error("could not sample a collision-free start after {0} attempts")]
    StartSampling(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
