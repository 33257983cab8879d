//! Volumetric multi-class segmentation with class-balanced soft-Dice losses.
//!
//! The crate bundles everything needed to run weighting-scheme experiments
//! end to end on the CPU: dense voxel containers and a binary volume format
//! ([`voxelgrid`]), differentiable 3D ops with explicit backward passes
//! ([`ops`]), Dice losses, weights and reports ([`dice`]), a small 3D U-Net
//! ([`unet3d`]), Adam and patch sampling ([`trainer`]), sliding-window
//! prediction ([`inference`]), synthetic multi-organ phantoms ([`phantom`])
//! and the command-line workflows ([`cli`]).

pub mod cli;
pub mod dice;
pub mod inference;
pub mod ops;
pub mod phantom;
pub mod real;
pub mod trainer;
pub mod unet3d;
pub mod voxelgrid;

pub use real::Real;
