//! Learned heteroscedastic measurement covariances for Kalman filtering.
//!
//! The crate trains regression models that predict a mean and a full
//! correlated covariance per input, either by Gaussian maximum likelihood or
//! end to end through a differentiable Kalman filter, adds Monte-Carlo
//! dropout epistemic uncertainty, and measures what each covariance source
//! does to downstream filter accuracy.

pub mod autodiff;
pub mod backend;
pub mod epistemic;
pub mod error;
pub mod experiment;
pub mod kalman;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod rng;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
pub use linalg::Matrix;
