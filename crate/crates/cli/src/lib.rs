//! Driver for training, verifying, simulating and benchmarking neural
//! contraction observers from TOML run configurations.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
