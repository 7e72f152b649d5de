//! Core algorithms for dual-camera defocus control.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (an allocator is required). File formats, the CLI and
//! the HTTP service live in the `dc2` companion crate.
//!
//! Module map:
//! - [`optics`]: thin-lens circle of confusion, defocus maps, focus sweeps.
//! - [`synth`]: procedural RGBD scenes, layered defocus rendering, dual
//!   wide/ultra-wide captures, focus stacks and focus-stack merging.
//! - [`align`]: backward warping, block-matching flow, occlusion estimation.
//! - [`nn`]: a small reverse-mode autodiff engine over NCHW tensors.
//! - [`dfnet`]: the detail fusion network.
//! - [`loss`], [`train`]: the multi-scale refocus objective and training loop.
//! - [`metrics`], [`eval`]: PSNR/SSIM, field-of-view alignment and the
//!   deblur/bokeh/refocus protocols.
//! - [`spec`]: user-facing defocus specifications and tiled inference.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod align;
pub mod dfnet;
pub mod error;
pub mod eval;
pub mod image;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod optics;
pub mod spec;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
