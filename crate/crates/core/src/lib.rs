//! Point-based single-stage 3D object detection with cross-cluster feature
//! shifting.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: sampling and grouping kernels (D-FPS, ball query,
//!   farthest-neighbour pairing) over a uniform hash grid.
//! - [`tensor`]: a small reverse-mode differentiable dense-matrix engine.
//! - [`ssa`]: multi-scale set abstraction with cross-cluster shifting and the
//!   alternative exchange/selection operators used for ablations.
//! - [`detector`]: the toy detector (backbone, vote layer, candidate
//!   aggregation, heads, box coding, rotated IoU and 3D NMS).
//! - [`losses`]: offset, classification and box losses.
//! - [`data`]: synthetic scene generation and on-disk formats.
//! - [`harness`]: training, receptive-field probe, latency bench, ablations.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod detector;
mod error;
pub mod geometry;
pub mod harness;
pub mod losses;
pub mod rng;
pub mod ssa;
pub mod tensor;

pub use error::{Error, Result};
