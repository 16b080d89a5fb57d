use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid or inconsistent configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called with arguments outside its contract.
    #[error("usage error: {0}")]
    Usage(String),

    /// The pooled least-squares design for a fit is rank deficient or
    /// too badly conditioned to solve.
    #[error("degenerate design at decision time {t} (condition number {condition:.3e})")]
    DegenerateDesign { t: usize, condition: f64 },

    /// The inferential bread matrix is not invertible.
    #[error("singular bread matrix (condition number {condition:.3e})")]
    SingularBread { condition: f64 },

    /// A policy-parameter diagonal block of the stacked bread is not invertible.
    #[error("singular policy bread block at decision time {t} (condition number {condition:.3e})")]
    SingularPolicyBread { t: usize, condition: f64 },

    /// A diagonal block of a block lower-triangular matrix is not invertible.
    #[error("singular diagonal block {block} (condition number {condition:.3e})")]
    SingularBlock { block: usize, condition: f64 },

    /// Stored trajectory data violates an invariant.
    #[error("data integrity error: {0}")]
    DataIntegrity(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    /// True for failures caused by the numerics of one replication
    /// (degenerate designs, singular breads) rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateDesign { .. }
                | Error::SingularBread { .. }
                | Error::SingularPolicyBread { .. }
                | Error::SingularBlock { .. }
        )
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
