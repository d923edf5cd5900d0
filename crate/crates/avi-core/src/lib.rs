//! Desk-scale "language-to-geometry" manipulation pipeline.
//!
//! The crate decomposes a scene point cloud into objects, tokenizes each
//! object's shape (patch vector-quantization over a 64³ occupancy grid) and
//! location (quantized centroid + scale bins appended to a text vocabulary),
//! predicts next-step tokens with pluggable predictors, recovers the rigid
//! transform between current and predicted clouds with Kabsch/ICP, and applies
//! it to a simulated end effector. The [`rollout`] module closes the loop and
//! aggregates success statistics; the `avi` binary exposes every stage.

pub mod error;
pub mod geometry;
pub mod icp;
pub mod io;
pub mod kdtree;
pub mod locquant;
pub mod predictor;
pub mod rollout;
pub mod segmentation;
pub mod vqtok;

pub use error::{Error, Result};
