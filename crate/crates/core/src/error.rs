use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// Variants split into two families: configuration/validation problems
/// (bad arguments, inconsistent inputs) and numeric failures (degenerate
/// data, singular systems). [`Error::is_validation`] tells them apart; the
/// CLI maps the two families onto distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("lag {lag} is not admissible for a series of length {n}")]
    Lag { lag: usize, n: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("model gradient vanishes at the evaluation point")]
    DegenerateGradient,
    #[error("nonpositive variance: {0}")]
    NonPositiveVariance(f64),
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("rank-deficient design for cumulant order {order}")]
    RankDeficient { order: usize },
    #[error("ratio did not stabilize for any exponent up to {cap}")]
    NonConvergence { cap: u32 },
    #[error("bias values change sign; log-log fit is undefined")]
    SignMixing,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("replicate {index} failed: {source}")]
    Replicate {
        index: u64,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by invalid input or configuration, as opposed
    /// to numeric failures discovered while computing.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Domain(_)
            | Error::Lag { .. }
            | Error::Config(_)
            | Error::Dimension(_)
            | Error::Io(_)
            | Error::Csv(_)
            | Error::Json(_) => true,
            Error::Replicate { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
