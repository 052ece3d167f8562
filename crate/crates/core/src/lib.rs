//! Difference-conditioned report generation for synthetic volumetric scans.
//!
//! A target volume and a normal reference are encoded, resampled onto a
//! shared set of latent queries, and compared; the resulting global and
//! local deltas are projected into prefix embeddings that condition a small
//! causal decoder.

pub mod autograd;
pub mod classifier;
pub mod config;
pub mod data;
pub mod decoder;
pub mod dpg;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod hde;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod training;

pub use error::{Error, Result};
