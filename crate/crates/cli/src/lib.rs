//! Batch experiment driver for the distribution-design optimizers.
//!
//! The binary in `main.rs` is a thin wrapper over [`run::execute`]; keeping
//! the drivers in a library lets integration tests exercise config parsing
//! and artifact layout without spawning processes.

pub mod config;
pub mod run;
