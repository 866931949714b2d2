//! CAPE: class activation maps as a probabilistic ensemble.
//!
//! The CAPE head replaces a global-average-pooling softmax classifier with
//! an ensemble of per-region class distributions weighted by a spatial
//! saliency softmax. The resulting voxel contributions sum exactly to the
//! class prediction, which makes region-level attention directly comparable
//! across classes.

pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod heads;
pub mod io;
pub mod metrics;
pub mod manifest;
pub mod model;
pub mod render;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
