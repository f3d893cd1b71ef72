//! Cross-modal feature alignment between LiDAR point clouds and camera feature maps.
//!
//! The pipeline projects points into the image with a calibrated rig, builds a
//! K-nearest-neighbor graph inside contiguous index chunks of the cloud, fuses
//! each point feature with the image features of its K neighbors, and lets a
//! small multi-head self-attention block weigh the K candidates before a
//! channelwise max picks the final fused feature.
//!
//! Modules:
//! - [`geometry`]: calibration rig, augmentation inversion, projection with the
//!   image-bounds correction rule.
//! - [`graph`]: chunked KNN graph and its full-space brute-force counterpart.
//! - [`fusion`]: image feature gather, neighbor block assembly, additive fusion.
//! - [`safa`]: self-attention over neighbor slots, max selection, a
//!   finite-difference trainer.
//! - [`scene`]: deterministic synthetic scenes and calibration perturbation.
//! - [`bench`]: alignment metrics by distance bucket, complexity and timing,
//!   hyperparameter sweeps.
//! - [`formats`]: binary and text file formats.
//! - [`oracle`]: slow reference implementations used for cross-checking.

pub mod bench;
pub mod error;
pub mod formats;
pub mod fusion;
pub mod geometry;
pub mod graph;
pub mod oracle;
pub mod safa;
pub mod scene;

pub use error::{Error, Result};
