//! Cone-beam CT (CBCT) reconstruction kernels.
//!
//! This crate holds the compute core of the FDK (filtered back-projection)
//! engine: scan geometry and per-view projection matrices, cosine weighting
//! and FFT ramp filtering of detector rows, the baseline voxel-driven
//! back-projection kernel plus a symmetry-optimized variant that cuts the
//! projection arithmetic to roughly one sixth, an analytic Shepp-Logan
//! phantom for ground truth, and a closed-form performance model for the
//! distributed pipeline.
//!
//! The crate is `no_std` (with `alloc`); everything here is pure
//! computation. IO, the pipelined multi-rank executor, and the CLI live in
//! the companion `fdk` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backprojection;
mod fft;
pub mod filtering;
pub mod geometry;
pub mod perfmodel;
pub mod phantom;

pub use backprojection::{OpCounter, Volume, VolumeLayout};
pub use filtering::{Projection, ProjectionKind};
pub use geometry::CbctGeometry;
