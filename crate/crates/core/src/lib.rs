//! Retrieval-augmented multivariate time-series forecasting.
//!
//! A hybrid spatial-temporal encoder is trained on sliding windows, every
//! training window's representation is cached in a key-value datastore, and
//! forecasts interpolate the encoder output with the futures attached to the
//! nearest cached representations.

pub mod data;
pub mod datastore;
pub mod encoder;
pub mod error;
pub mod forecaster;
pub mod graph;
pub mod metrics;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
