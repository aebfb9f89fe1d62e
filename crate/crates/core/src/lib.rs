//! Rigid-instance scene flow.
//!
//! Given dense cues for a stereo frame pair (disparity for both frames,
//! left optical flow and an instance segmentation), `rigidflow` estimates one
//! SE(3) motion per instance, background included, by minimizing a robust
//! photometric / rigid-fit / flow-consistency energy with an iteratively
//! reweighted Gauss-Newton solver. The motions compose into dense scene flow,
//! which [`evaluate`] scores with KITTI-style outlier metrics. [`curate`] turns
//! pixel-level ground truth into per-instance rigid-motion labels and
//! [`synth`] renders scenes whose cues and motions are known exactly.
//!
//! The guide in `book/` walks through each stage; its code listings are
//! compiled and run as doctests of this crate.

pub mod config;
pub mod curate;
pub mod energy;
pub mod error;
pub mod evaluate;
pub mod frameio;
pub mod geometry;
pub mod init;
pub mod solver;
pub mod synth;

pub use error::{Error, Result};
pub use geometry::{CameraRig, Pixel, RigidMotion, Twist, Vec3};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/geometry.md")]
    struct Geometry;
    #[doc = include_str!("../../../book/src/energy.md")]
    struct Energy;
    #[doc = include_str!("../../../book/src/inference.md")]
    struct Inference;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/curation.md")]
    struct Curation;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
}
