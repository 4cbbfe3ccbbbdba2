//! Bayesian factor stochastic volatility with global-local shrinkage on the
//! loadings, for estimating and forecasting high-dimensional time-varying
//! covariance matrices.

pub mod baselines;
pub mod cli;
pub mod config;
pub mod error;
pub mod gibbs;
pub mod io;
pub mod model;
pub mod predict;
pub mod samplers;
pub mod sim;
pub mod store;
pub mod sv;

pub use error::{FsvError, Result};
