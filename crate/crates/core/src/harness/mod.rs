//! Configuration, dataset layout, training loop and the CLI commands.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod oracle;
pub mod train;

pub use commands::*;
pub use config::{RunConfig, Task};
pub use train::Trainer;
