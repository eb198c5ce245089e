use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("out-of-vocabulary symbol {0:?}")]
    OutOfVocabulary(String),

    #[error("unknown domain {0:?}")]
    UnknownDomain(String),

    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("corrupt file {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("missing upstream artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("artifact {0} already exists (pass --force to overwrite)")]
    ArtifactExists(PathBuf),

    #[error("workspace {0} is locked by another run")]
    Locked(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Validation-class errors map to CLI exit code 1, everything else to 2.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingArtifact(_)
                | Error::ArtifactExists(_)
                | Error::UnknownStrategy(_)
                | Error::UnknownDomain(_)
                | Error::Locked(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
