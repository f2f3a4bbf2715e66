//! Multi-view performer synthesis toolkit: depth-based warping conditions,
//! monocular depth refinement, and a small multi-view flow-matching
//! denoiser, with an analytic ray-cast scene generator as ground truth.

pub mod denoiser;
pub mod depth_refine;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod grad;
pub mod harness;
pub mod image;
pub mod io;
pub mod metrics;
pub mod selftest;
pub mod splat;

pub use error::{Error, Result};
