use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("quality gate failed: {0}")]
    QualityGate(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("state error: {0}")]
    State(String),
    #[error("missing prerequisite {path}: run `{producer}` first")]
    MissingPrerequisite { path: PathBuf, producer: &'static str },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 validation, 3 missing prerequisite, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Shape(_)
            | Error::Ingestion(_)
            | Error::Checkpoint(_) => 2,
            Error::MissingPrerequisite { .. } | Error::State(_) => 3,
            Error::Numeric(_) | Error::QualityGate(_) | Error::Divergence(_) => 4,
            Error::Io { .. } | Error::Json(_) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
