//! Multiple View Performer shape-completion lab.
//!
//! A stream of unregistered 2.5D voxel views is folded into a constant-size
//! associative memory by causal linear attention; a two-tower 3D CNN
//! encoder/decoder turns the current view plus the retrieved context into a
//! full occupancy grid in the current camera frame.
//!
//! Modules:
//! - [`numerics`]: f64 tensors, reverse-mode tape, 3D convolutions, Adam.
//! - [`attention`]: kernel feature maps, the compact associative memory and
//!   causal linear / exact attention.
//! - [`voxel`]: grids, voxelization, marching cubes, surface sampling, `.vxg` I/O.
//! - [`scenes`]: procedural solids, depth raycasting, the five view protocols.
//! - [`model`]: MVP / MVT / LSTM / single-view networks, training, checkpoints.
//! - [`metrics`]: Jaccard, F-score and sequence evaluation.
//! - [`bench`]: attention throughput against sequence length.

pub mod attention;
pub mod bench;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod scenes;
pub mod voxel;

pub use error::{Error, Result};
pub use parallel::ExecMode;
