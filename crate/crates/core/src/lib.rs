//! Reconstruction of sharp articulated Gaussian avatars from motion-blurred
//! multi-view video.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod avatar;
pub mod config;
pub mod datagen;
pub mod diffopt;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod renderer;

pub use error::{Error, Result};
