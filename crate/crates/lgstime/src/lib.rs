//! Multivariate sequence forecasting with fused recurrent streams and
//! banded multi-head sparse self-attention.
//!
//! The crate is organized around the pieces of that pipeline:
//!
//! - [`tensor`]: dense matrices and the reverse-mode autodiff tape
//! - [`cells`]: LSTM and GRU steps plus sequence unrolling
//! - [`attention`]: the banded multi-head attention block
//! - [`model`]: the fused forecaster, its ablation and baseline variants,
//!   and checkpoint I/O
//! - [`metrics`] and [`train`]: MSE/MAE/RMSE, Adam, the epoch loop, and
//!   repeat aggregation
//! - [`data`]: CSV ingestion, chronological 7:1:2 splitting, train-fitted
//!   standardization, sliding windows, and a synthetic generator
//! - [`harness`]: experiment specs, results tables, and run artifacts
//! - [`check`]: finite-difference gradient checking, the dense attention
//!   oracle, and the registered verification properties

pub mod attention;
pub mod cells;
pub mod check;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
