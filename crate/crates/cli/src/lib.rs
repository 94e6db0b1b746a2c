//! Experiment plumbing behind the `cape` binary.

pub mod commands;
pub mod config;

pub use commands::{ablate, dry_run, dump_kernels, eval, exit_code, generate, train};
pub use config::ExperimentConfig;
