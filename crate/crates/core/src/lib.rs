//! Graph reasoning and transfer across label taxonomies.
//!
//! Pixel features are projected onto one semantic graph per label domain,
//! evolved by graph convolution over a knowledge-defined adjacency,
//! exchanged between domains through transfer matrices, and re-projected
//! onto the pixels for classification. Everything differentiates through the
//! [`autodiff::Tape`].

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod gradpaths;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod panoptic;
pub mod params;
pub mod projection;
pub mod reasoning;
pub mod render;
pub mod sampler;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
