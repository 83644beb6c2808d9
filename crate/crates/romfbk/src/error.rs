use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Linear or nonlinear solver failed to reach its tolerance.
    #[error("solver failure: {0}")]
    SolverFailure(String),

    /// Two objects that must share a discretization or dimension do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Operation needs a forward model but the controller has none.
    #[error("controller model has no latent forward model")]
    MissingForwardModel,

    /// Operation is outside the supported problem family.
    #[error("not supported: {0}")]
    NotSupported(String),

    /// Artifact file malformed, truncated, or of the wrong kind/version.
    #[error("artifact format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
