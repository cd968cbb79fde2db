//! Experiment runner for the weakboost schemes.

pub mod commands;
pub mod config;

pub use commands::{cmd_converge, cmd_pde, cmd_variance, Overrides, Summary};
pub use config::ExperimentConfig;
