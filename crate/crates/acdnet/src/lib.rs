//! Panoramic monocular depth estimation with adaptively combined dilated
//! convolutions.
//!
//! The crate bundles a small deterministic f64 tensor engine with reverse-mode
//! differentiation, spherical (circular) feature padding, the ACDConv layer
//! and its fusion strategies, an encoder/decoder depth network with iterative
//! multi-scale prediction, the BerHu loss and standard depth metrics, and
//! equirectangular geometry utilities for synthetic data and point-cloud
//! export. Everything runs on the CPU and is reproducible from a seed.

pub mod ablate;
pub mod acdconv;
pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod pad;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
