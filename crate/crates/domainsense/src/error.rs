//! Crate-wide error type.
//!
//! Errors are grouped by who is at fault:
//!
//! - [`Error::Dimension`] / [`Error::Contract`]: the caller passed shapes or
//!   values that violate an operation's preconditions.
//! - [`Error::Data`] / [`Error::Parse`]: a dataset, file, or covariance
//!   matrix is malformed.
//! - [`Error::Protocol`]: an experiment-protocol rule was broken (too few
//!   domains, split index out of range, ...).
//! - [`Error::Capability`]: the request is well-formed but unsupported in
//!   the selected mode (e.g. an exact Hessian-vector product through an
//!   operation that is not twice differentiable at the evaluation point).
//! - [`Error::Divergence`]: training produced a non-finite loss.
//!
//! The CLI maps these groups onto its exit codes; see [`Error::exit_code`].

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("dimension mismatch in {context}: {details}")]
    Dimension { context: String, details: String },

    /// An operation's precondition was violated (non-scalar loss node,
    /// mismatched vector lengths, negative scale, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed data: empty dataset, label out of range, negative variance,
    /// asymmetric covariance, ...
    #[error("data error: {0}")]
    Data(String),

    /// File contents that do not parse; carries a location when available.
    #[error("parse error: {0}")]
    Parse(String),

    /// Experiment-protocol violation.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Unsupported mode/operation combination.
    #[error("capability error: {0}")]
    Capability(String),

    /// Training reached a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),

    /// Underlying I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Convenience constructor for [`Error::Dimension`].
    pub fn dimension(context: impl Into<String>, details: impl Into<String>) -> Self {
        Error::Dimension {
            context: context.into(),
            details: details.into(),
        }
    }

    /// Process exit code used by the command-line interface.
    ///
    /// `0` is success, `1` a validation failure (reported separately by the
    /// `validate` command), `2` a usage or protocol error, and `3` a data
    /// error.  Everything that stems from a malformed file or dataset maps
    /// to `3`; everything that stems from how the toolkit was invoked maps
    /// to `2`.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Data(_) | Error::Parse(_) | Error::Io(_) => 3,
            Error::Dimension { .. }
            | Error::Contract(_)
            | Error::Protocol(_)
            | Error::Capability(_)
            | Error::Divergence(_) => 2,
        }
    }
}
