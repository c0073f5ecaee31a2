//! Few-view voxel radiance field reconstruction regularized by a multistep
//! diffusion prior.
//!
//! The pieces, bottom-up: camera [`geometry`], the novel-view pose
//! distribution ([`posedist`]), a dense trilinear [`field`], a differentiable
//! volume [`render`]er, the sampler and denoiser contract ([`diffusion`]),
//! epipolar [`conditioning`], training [`losses`], and the optimization loop
//! ([`recon`]). [`scenes`] supplies analytic ground truth.

pub mod conditioning;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod posedist;
pub mod recon;
pub mod render;
pub mod scenes;

pub use error::{Error, Result};
pub use field::VoxelField;
pub use geometry::{CameraPose, Intrinsics, PosedImage, Ray};
pub use image::Image;
