//! Indoor scene reconstruction from posed images: neural signed-distance,
//! colour and plane-probability fields optimised by differentiable volume
//! rendering, supervised by triangulated sparse depth and large-plane normal
//! constraints, then meshed and scored.

pub mod dataset;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
mod mc_tables;
pub mod meshing_eval;
pub mod fields;
pub mod nn;
pub mod pipeline;
pub mod plane_seg;
pub mod rendering;
pub mod sparse_depth;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use geometry::{CameraModel, Pose, Ray, Vec3};
