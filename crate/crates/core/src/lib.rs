//! Part segmentation as voxel colorization.
//!
//! A conditional flow-matching transformer generates part-indicative colors on
//! the active voxels of a shape. One model serves three tasks: interactive
//! (click-prompted) part extraction, unconditioned full segmentation, and full
//! segmentation guided by a rendered 2D part map.

pub mod codec;
pub mod container;
pub mod dataset;
pub mod flowcore;
pub mod linalg;
pub mod optim;
pub mod partdecode;
pub mod segdit;
pub mod shapeforge;
pub mod voxcore;
