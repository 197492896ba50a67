//! Configuration-driven experiment runner for `wpa-core`.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::Overrides;
pub use config::ExperimentConfig;
