use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown model `{0}` (expected `contract-multijump` or `two-regime-ou`)")]
    UnknownModel(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("time {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("runaway trajectory: more than {cap} jumps before horizon {horizon}")]
    RunawayTrajectory { cap: usize, horizon: f64 },

    #[error("combined support has {size} points, above the cap of {cap}")]
    SupportCapExceeded { size: usize, cap: usize },

    #[error("empty measure")]
    EmptyMeasure,

    #[error("observable carries no stationary mean; estimate it first")]
    MissingMean,

    #[error("horizon too short: {0}")]
    HorizonTooShort(String),

    #[error("misaligned inputs: {0}")]
    Misaligned(String),

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("internal solver failure: {0}")]
    Solver(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}
