//! Hidden Markov models with modified-Cholesky-constrained Gaussian emissions
//! for multivariate panel data, with probit missingness and dropout.

pub mod cholesky;
pub mod covariance;
pub mod dropout;
pub mod em;
pub mod error;
pub mod forward_backward;
pub mod io;
pub mod metrics;
pub mod missingness;
pub mod simulate;
pub mod types;

pub use error::{Error, Result};
