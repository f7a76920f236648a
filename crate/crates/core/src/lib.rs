//! Brain-machine fusion learning at desk scale.
//!
//! A frozen vision transformer turns images into a CLS token and patch
//! tokens; a frozen decoder predicts a voxel response vector from the patch
//! tokens; a brain transformer tokenizes that response; a bidirectional
//! cross-attention module fuses both modalities for classification, trained
//! with cross-entropy plus a Pearson-correlation term between the two fused
//! features.

pub mod brain_encoder;
pub mod brain_transformer;
pub mod data;
pub mod error;
pub mod fit;
pub mod fusion;
pub mod harness;
pub mod image_encoder;
pub mod numerics;
pub mod objective;

pub use error::{Error, Result};
