//! Gravity-aided 4-DOF relative camera pose estimation.
//!
//! Roll and pitch come from the gravity direction; yaw and translation are
//! estimated from stereo keyframe points and current-frame observations.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod consensus;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod pnp4dof;
pub mod sim;
pub mod stereo;

pub use error::{Error, Result};
pub use geometry::{EulerYRP, Pose4, PoseSE3, StereoRig};
pub use sim::SimConfig;
pub use stereo::{Correspondence, TriPoint};
