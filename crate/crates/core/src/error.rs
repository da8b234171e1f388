//! Error types shared across the crate.
//!
//! Errors are grouped by origin so callers (in particular the CLI, which maps
//! them to process exit codes) can tell a bad configuration from bad data from
//! a numerical failure without inspecting message strings.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// The request itself is malformed: unknown column names, empty variable
    /// lists, inconsistent options, unparseable configuration.
    #[error("config error: {0}")]
    Config(String),

    /// The data cannot support the request: missing files, malformed cells,
    /// duplicate keys, empty samples after filtering.
    #[error("data error: {0}")]
    Data(String),

    /// The estimator failed numerically: non-convergence, perfect separation,
    /// singular systems, infeasible balance constraints.
    #[error("estimation error: {0}")]
    Estimation(String),
}

impl Error {
    /// Shorthand for a configuration error.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand for a data error.
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// Shorthand for an estimation error.
    pub fn estimation(msg: impl Into<String>) -> Self {
        Error::Estimation(msg.into())
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
