//! Experiment runner library behind the `ras` binary: configuration,
//! the evolution runner with checkpoints, bank building, stats export and
//! the evaluation protocol server.

pub mod commands;
pub mod config;
pub mod eval_server;
pub mod runner;
pub mod stats;
pub mod victims;

pub use config::{DatasetConfig, DatasetSource, RunConfig};
pub use runner::{run_evolve, Checkpoint, RunReport};
