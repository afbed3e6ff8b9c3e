//! LiDAR/camera feature alignment with cross-attention and self-supervised
//! instance interaction, on top of a small reverse-mode autodiff tape.

pub mod ablate;
pub mod cafa;
pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod image_branch;
pub mod model;
pub mod params;
pub mod point_branch;
pub mod scene;
pub mod scfi;
pub mod train;

pub use error::{AlignError, Result};
