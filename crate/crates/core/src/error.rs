use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("invalid parameter `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("unknown scheme `{0}` (expected unregulated, basle or perfect_hedge)")]
    UnknownScheme(String),
}

/// The market could not be cleared: no sign change of excess demand was found
/// after expanding the price bracket.
#[derive(Debug, Error, Clone, PartialEq)]
#[error(
    "clearing failed at step {step}: no sign change in [{p_lo:e}, {p_hi:e}] \
     (excess {excess_lo:e} .. {excess_hi:e}, xi {xi:e}, previous price {p_prev:e}, \
     lambda_adapt {lambda_adapt})"
)]
pub struct ClearingFailure {
    pub step: u64,
    pub p_prev: f64,
    pub xi: f64,
    pub lambda_adapt: f64,
    pub p_lo: f64,
    pub p_hi: f64,
    pub excess_lo: f64,
    pub excess_hi: f64,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error(transparent)]
    Clearing(#[from] ClearingFailure),
}

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("unknown plot kind `{kind}`; valid kinds: {valid}")]
    UnknownPlotKind { kind: String, valid: String },
    #[error("{path}: malformed table: {reason}")]
    Table { path: PathBuf, reason: String },
}

impl RunnerError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RunnerError::Io {
            path: path.into(),
            source,
        }
    }
}
