//! Exact finite-sample theory for the normal-means model.

pub mod laws;
pub mod neyman_scott;
pub mod special;

use thiserror::Error;

pub use laws::{Gamma3, InvGamma3};
pub use neyman_scott::*;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Quadrature(#[from] special::QuadratureError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
