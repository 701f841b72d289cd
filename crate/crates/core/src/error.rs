use std::io;

use numkit::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FedError {
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("matrix is not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, FedError>;

impl FedError {
    /// Divergence, non-finite values and failed estimates abort a run;
    /// everything else is a configuration or input problem.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            FedError::Diverged(_)
                | FedError::Num(NumError::NonFinite(_))
                | FedError::NotPsd(_)
                | FedError::Estimation(_)
        )
    }
}
