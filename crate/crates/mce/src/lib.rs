//! Experiment harness and CLI around `mce-core`: TOML configs, desk-scale
//! presets, a parallel Monte Carlo runner and report files.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod report;

pub use config::{preset, ExperimentConfig};
pub use error::{AppError, AppResult};
pub use experiment::{run_experiment, ExperimentReport};
