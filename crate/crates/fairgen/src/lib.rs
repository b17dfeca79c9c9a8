//! Two-stage fairness pipeline for image classification at desk scale:
//! group-balanced synthetic data generation behind pluggable backends,
//! embedding-score filtering, combined cross-entropy + supervised-contrastive
//! pretraining, and last-layer retraining on real data, evaluated with
//! worst-group and average-group accuracy.

pub mod cluster;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod filter;
pub mod gen;
pub mod image;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod prompt;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
