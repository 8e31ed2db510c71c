//! Blur-aware articulated human reconstruction from motion-blurred frames
//! and an event stream.
//!
//! The pipeline optimizes a canonical-space voxel appearance field and a
//! time-to-pose network against blurry supervision, using a rendered
//! per-pixel velocity map to down-weight blurred pixels and event-integral
//! supervision to constrain them.

pub mod autodiff;
pub mod body;
pub mod config;
pub mod error;
pub mod camera;
pub mod events;
pub mod field;
pub mod math;
pub mod render;
pub mod render_tape;
pub mod velocity;

pub use error::{Error, Result};
