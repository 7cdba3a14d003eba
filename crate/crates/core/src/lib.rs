//! Constrained deep Gaussian process priors on `[-1,1]^d`.

pub mod checks;
pub mod composition;
pub mod concentration;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod inference;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod quadrature;
pub mod rkhs;
pub mod rng;
pub mod sampling;

pub use error::{Error, Result};
pub use grid::{GridFunction, GridSpec};
