//! Studentized inference for weakly dependent time series.
//!
//! The crate estimates long-run variances with lag-window and
//! block-resampling estimators, forms studentized statistics for smooth
//! functions of a multivariate mean, evaluates a third-order Edgeworth
//! expansion for their distribution, and runs reproducible Monte Carlo
//! experiments that check the resulting accuracy and bias rates.

pub mod covariance;
pub mod edgeworth;
pub mod error;
pub mod harness;
pub mod lrv;
pub mod quadrature;
pub mod series;
pub mod simulate;
pub mod studentize;
pub mod tapers;

pub use error::{Error, Result};
pub use series::Series;
