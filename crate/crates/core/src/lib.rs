//! Aggregation of conditional quantile models.
//!
//! The crate covers the whole pipeline: proper scoring rules ([`scoring`]),
//! isotonization operators ([`isotonic`]), a small reverse-mode training
//! engine ([`neuralnet`]), lightweight base quantile regressors
//! ([`basemodels`]), global and local weighted aggregators ([`aggregator`]),
//! conformal calibration ([`conformal`]) and experiment orchestration
//! ([`harness`]). [`distlab`] compares probability and quantile averaging of
//! distributions numerically.

pub mod aggregator;
pub mod basemodels;
pub mod conformal;
pub mod distlab;
pub mod error;
pub mod harness;
pub mod isotonic;
pub mod linalg;
pub mod neuralnet;
pub mod scoring;
pub mod seed;

pub use error::{Error, Result};
pub use linalg::Mat;
pub use scoring::QuantileGrid;
