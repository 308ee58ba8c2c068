use thiserror::Error;

/// Errors produced anywhere in the conjoint pipeline.
///
/// The variants are coarse on purpose: the command-line driver maps each one
/// onto a process exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// An attribute or level name that the scheme does not declare.
    #[error("coding error: {0}")]
    Coding(String),
    /// A precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),
    /// The experimental design cannot produce valid choice tasks.
    #[error("design error: {0}")]
    Design(String),
    /// The data cannot be fitted as given (constant columns, schema mismatches).
    #[error("data error: {0}")]
    Data(String),
    /// The sampler failed or produced an unusable fit.
    #[error("fit error: {0}")]
    Fit(String),
    /// Too many posterior draws had a non-negative price coefficient.
    #[error(
        "sign-safety error for `{feature}`: {flagged} of {total} draws have a non-negative price coefficient"
    )]
    SignSafety {
        feature: String,
        flagged: usize,
        total: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
