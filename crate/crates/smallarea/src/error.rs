//! Error taxonomy shared by every module in the crate.
//!
//! Errors are split by what the caller can do about them: domain and
//! specification errors mean the inputs must change, convergence and
//! degeneracy errors mean the data did not support the requested model.

use crate::fit::FittedModel;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A distribution was evaluated outside the domain of its parameters
    /// or the support of its response.
    #[error("domain error: {0}")]
    Domain(String),

    /// A requested moment does not exist for the given parameter values,
    /// e.g. the Dagum mean when the shape `sigma` is at or below 1.
    #[error("moment undefined: {0}")]
    MomentUndefined(String),

    /// An iterative procedure ran out of iterations or step halvings.
    /// The partial fit, when one exists, is attached so callers can
    /// inspect or persist it.
    #[error("convergence failure: {message}")]
    Convergence {
        message: String,
        partial: Option<Box<FittedModel>>,
    },

    /// The model specification is inconsistent with the data or the family,
    /// e.g. a term names a missing column or a parameter the family lacks.
    #[error("model specification error: {0}")]
    Spec(String),

    /// The design matrix for some parameter is rank deficient; the message
    /// names the offending columns.
    #[error("rank deficiency: {0}")]
    Rank(String),

    /// Responses fall outside the support of the requested family; detected
    /// before any iteration and reported with the offending row indices.
    #[error("response outside family support: {0}")]
    Support(String),

    /// `lr_test` was called on models that are not nested.
    #[error("models are not nested: {0}")]
    Nesting(String),

    /// A scenario or run configuration failed validation.
    #[error("configuration error: {0}")]
    Config(String),

    /// More than the tolerated share of bootstrap replicates failed.
    #[error("bootstrap degenerate: {0}")]
    Degenerate(String),

    /// Malformed input data (bad column, unparseable cell, role mismatch).
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    /// Convergence failure without a partial fit.
    pub fn convergence(message: impl Into<String>) -> Self {
        Error::Convergence {
            message: message.into(),
            partial: None,
        }
    }
}
