//! Differentiable 3D Gaussian splat rasterization on a deterministic software
//! model of a GPU fragment pipeline.
//!
//! The forward pass emulates fixed-function "under" blending into a
//! format-quantized render target. The backward pass walks the same fragment
//! stream front to back inside a per-pixel ordered critical section, keeping a
//! `(C', T)` state texture, and reduces per-fragment gradients into per-splat
//! slots through quad and subgroup collectives.
//!
//! Everything here is `no_std` + `alloc`; file formats, the CLI and threaded
//! drivers live in the `hwsplat` companion crate.
#![no_std]

extern crate alloc;

pub mod backward;
pub mod error;
pub mod forward;
pub mod memory;
pub mod oracle;
pub mod pipeline;
pub mod precision;
pub mod projection;
pub mod reduction;
pub mod scene;
pub mod sh;
pub mod sim;
pub mod sort;
pub mod synthetic;

pub use error::{Error, Result};

/// Fragments with `alpha` below this value are discarded.
pub const ALPHA_CULL: f64 = 1.0 / 255.0;
/// Backward traversal of a pixel stops once transmittance drops below this.
pub const T_CULL: f64 = 1e-4;
/// Upper clamp on per-fragment alpha, keeps `1 / (1 - alpha)` bounded.
pub const ALPHA_MAX: f64 = 0.999;
/// Screen-space low-pass added to every projected covariance.
pub const COV_DILATION: f64 = 0.3;
/// Quad half-extent in standard deviations along each eigen-axis.
pub const QUAD_EXTENT_SIGMAS: f64 = 3.33;
