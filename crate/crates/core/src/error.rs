use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside its mathematical domain (e.g. a level outside (0,1)).
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a documented precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Array shapes or quantile grids that should agree do not.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training or evaluation produced a non-finite value.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Malformed or unusable input data.
    #[error("data error: {0}")]
    Data(String),

    /// A model saw data it must not have been trained on.
    #[error("provenance violation: {0}")]
    Provenance(String),

    /// Failure inside one stage of an experiment pipeline.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps the error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
