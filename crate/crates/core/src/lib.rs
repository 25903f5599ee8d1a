//! Differentiable active-contour segmentation.
//!
//! A U-Net predicts a two-channel displacement field from an image; a
//! polygon initialized as a small centered circle is pushed along that
//! field for a few iterations, rasterized by a soft differentiable
//! renderer, and compared against the ground-truth mask. Everything from
//! the mask loss back to the network weights is differentiated by the
//! small reverse-mode engine in [`tensor`].

pub mod config;
pub mod contour;
pub mod data;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod renderer;
pub mod tensor;

pub use error::{Error, Result};
