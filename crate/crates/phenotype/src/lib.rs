//! Feature learning for sparse, irregularly sampled laboratory time-series.
//!
//! The pipeline selects a two-class cohort from MIMIC-shaped CSV tables,
//! conditions each admission's series with a monotone time warp and exact
//! Gaussian process regression, learns sparse features with a two-layer
//! stacked autoencoder, and evaluates the feature space with a t-SNE
//! embedding and logistic-regression AUC.

pub mod analysis;
pub mod autoencoder;
pub mod cohort;
pub mod config;
pub mod error;
pub mod gpr;
pub mod pipeline;
pub mod plot;
pub mod preprocess;
pub mod seeds;
pub mod synth;

pub use error::{Error, Result};
