use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("fit failed after restarts (best residual {residual:.6e}): {reason}")]
    FitFailed { reason: String, residual: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("optimizer could not evaluate the initial point: {0}")]
    InitFailed(String),

    #[error("no interior maximum in the coarse sweep: {0}")]
    BracketFailed(String),

    #[error("calibration failed: {0}")]
    CalibrationFailed(String),

    #[error("missing prerequisite: {0}")]
    Dependency(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
