//! Texture-aware selective state-space image restoration.
//!
//! The crate is layered bottom-up:
//! - [`tensor`] and [`tape`]: a dense f64 tensor type and reverse-mode
//!   autodiff over an append-only op tape.
//! - [`scan`]: zero-order-hold discretization, texture modulation, and the
//!   selective scan applied to planned token sequences.
//! - [`texture`]: patch grids, per-patch variance, descending-variance
//!   ordering and top-p selection.
//! - [`params`], [`arch`]: the parameter store and the residual block /
//!   group / full model assembly.
//! - [`train`], [`checkpoint`]: loss, Adam, the deterministic training loop
//!   and bit-exact checkpoints.
//! - [`metrics`], [`flops`], [`data`]: Y-channel PSNR/SSIM, the
//!   degradation-vs-texture profile, the analytic FLOPs accountant, and
//!   image I/O with a synthetic texture corpus.

pub mod arch;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod scan;
pub mod tape;
pub mod tensor;
pub mod texture;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
