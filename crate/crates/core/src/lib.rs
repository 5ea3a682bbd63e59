//! Multi-scale windowed visual resampler bridge.
//!
//! An `L×L×C` feature map is partitioned into non-overlapping windows at
//! several window sizes; per scale, a set of learnable queries shared across
//! windows cross-attends to each window and emits a fixed number of tokens.
//! Scales are concatenated coarse-to-fine. After pre-training the token
//! count can be raised by increasing resolution and shrinking windows, with
//! new resamplers initialized from existing ones.

pub mod assembly;
pub mod cost_model;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod presets;
pub mod resampler;
pub mod scaling;
pub mod windowing;

pub use error::{CosError, Result, Violation, ViolationKind};
pub use numerics::{Tape, Tensor, Var};
