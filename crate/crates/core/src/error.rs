use thiserror::Error;

use crate::geom::Frame;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("frame mismatch: expected {expected}, found {found}")]
    FrameMismatch { expected: Frame, found: Frame },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid arm model: {0}")]
    InvalidModel(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("grasp contacts are coincident")]
    CoincidentContacts,
    #[error("motion adaptation solution is infeasible")]
    Infeasible,
    #[error("mass matrix is not positive definite")]
    SingularMassMatrix,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}
