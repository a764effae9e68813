//! Cluster-based inference for spatially dependent data.
//!
//! Observations carry a known dissimilarity measure; k-medoids learns
//! candidate partitions, a fitted Gaussian covariance model drives a
//! simulation that calibrates the test level and cluster count, and the
//! calibrated IM / CRS / CCE / UNIT tests are applied to the data.

// `!(x > 0.0)` is the NaN-rejecting form of `x <= 0.0`: it also catches NaN
// quantities that must abort the surrounding computation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops over several same-length arrays at once stay as index loops
#![allow(clippy::needless_range_loop)]

pub mod app;
pub mod calibration;
pub mod clustering;
pub mod covmodel;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod regression;
pub mod rng;
pub mod simstudy;

pub use error::{Error, Result};
