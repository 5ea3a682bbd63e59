//! Checkpoints, config documents, synthetic training and property checks.

pub mod checkpoint;
pub mod config;
pub mod props;
pub mod synthetic;
pub mod train;
