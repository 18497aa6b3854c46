//! Experiment harness: configuration, datasets, checkpoints, metrics and
//! the grid runner behind the `repl` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod metrics;
