use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("archive format error: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// CLI exit code per command contract: 2 config, 3 numeric, 4 missing artifact.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) | Error::ShapeMismatch(_) => 2,
            Error::Numeric(_) => 3,
            Error::MissingArtifact(_) => 4,
            Error::Format(_) | Error::Io { .. } => 4,
        }
    }
}
