//! Three-view action recognition for micro aerial vehicle motion patterns.
//!
//! Each clip is seen through three views (RGB appearance, dense optical flow,
//! binary motion mask). Every view runs through its own 3D residual encoder;
//! a per-view feature pyramid pools the four stages into a per-frame
//! descriptor, the descriptors are concatenated, and multi-head self-attention
//! over frames feeds a two-layer classifier. Training combines cross-entropy
//! with a cross-view contrastive alignment term and an attention-entropy
//! regulariser.

pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod synth;
pub mod train;
pub mod views;

pub use error::{MavrError, Result};
