//! Landmark-based anatomical segmentation: a convolutional encoder maps a
//! chest radiograph to a latent code, and a spectral graph-convolutional
//! decoder maps that code to organ contour landmarks. Includes the training
//! loop, synthetic data generation, and contour/mask evaluation metrics.

pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
