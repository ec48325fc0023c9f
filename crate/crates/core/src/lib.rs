//! Core algorithms for collaborative neural-point SLAM.
//!
//! The crate is `no_std` (alloc required): every module here is pure
//! computation over in-memory data. File formats, the CLI and threaded
//! execution live in the companion `pointslam-cli` crate.
//!
//! Pipeline shape: per-agent frontends track camera poses against a neural
//! point map and optimize point features plus three small decoder MLPs by
//! differentiable volume rendering. A server collects keyframe descriptors,
//! detects loops, fuses sub-maps with a rendering-estimated relative pose,
//! federates decoder weights, and finally runs pose graph optimization and
//! keyframe-centric map refinement.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod camera;
pub mod codec;
pub mod decoders;
pub mod render;
pub mod frame;
pub mod frontend;
pub mod nn;
pub mod optim;
pub mod point_map;
pub mod pose;
pub mod scene;

pub use camera::{backproject, project_world, CameraError, Intrinsics};
pub use frame::{ColorImage, DepthImage, Frame, FrameError};
pub use pose::{Pose, Quat};

/// FNV-1a hash, used for cheap content fingerprints in tests and manifests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
