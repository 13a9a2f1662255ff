//! Label-efficient semantic segmentation for LiDAR sequences.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`cloud`]: KITTI-style sequence I/O, ego-pose fusion, voxel subsampling
//!   and a ray-cast synthetic scene generator.
//! - [`preseg`]: per-cell RANSAC ground detection, range-adaptive connected
//!   components, subdivision and small-component filtering.
//! - [`labeling`]: simulated component-wise annotation and the derived
//!   sparse / weak / propagated label types.
//! - [`losses`]: weighted cross-entropy, weak-label, prototype-contrastive and
//!   distillation losses with closed-form gradients.
//! - [`model`]: a point-wise MLP classifier with hand-written backprop, used to
//!   exercise the training recipe end to end.
//! - [`metrics`]: confusion matrices and mIoU.
//! - [`pipeline`]: dataset assembly, training frames and the ablation benchmark.

pub mod cloud;
pub mod error;
pub mod geom;
pub mod labeling;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preseg;
pub mod spatial;

pub use error::{Error, Result};

/// Semantic class id.
pub type ClassId = u16;

/// Class id of points without ground truth.
pub const UNLABELED: ClassId = ClassId::MAX;

/// Class masks are `u32` bitsets.
pub const MAX_CLASSES: usize = 32;

/// Seed for an independent RNG stream derived from a base seed.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
