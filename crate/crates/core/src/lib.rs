//! Weakly-supervised anomaly detection for multimodal tabular data.
//!
//! A variational autoencoder with a Gaussian-mixture prior models the
//! clusters of the normal data; a small network turns the cluster posterior,
//! the latent code and three reconstruction statistics into an anomaly score.
//! A handful of labeled anomalies steer both parts during training.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod estimator;
pub mod features;
pub mod gmm;
pub mod kv;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod seed;
pub mod synthetic;
pub mod trainer;
pub mod vae;

pub use error::{Error, Result};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/introduction.md")]
mod book_introduction {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/data.md")]
mod book_data {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/model.md")]
mod book_model {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/training.md")]
mod book_training {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/evaluation.md")]
mod book_evaluation {}

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
mod book_cli {}
