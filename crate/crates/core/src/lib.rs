//! Occlusion-robust hybrid visual tracker.
//!
//! A frame is coarsely located by normalized cross-correlation, screened for
//! occlusion, refined by feature-space Lucas–Kanade plus a learned residual,
//! and bridged by a recurrent motion predictor when the target is hidden.

// Negated comparisons are used on purpose so NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Test oracles index straight loops to mirror the math.
#![cfg_attr(test, allow(clippy::needless_range_loop))]

pub mod align;
pub mod bench;
pub mod cli;
pub mod error;
pub mod features;
pub mod gate;
pub mod img;
pub mod locate;
pub mod nn;
pub mod pipeline;
pub mod predict;
pub mod residual;

pub use error::{Error, Result};
pub use img::{GrayFrame, Patch, WarpParams};
