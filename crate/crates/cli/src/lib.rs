//! Command-line pipeline around `gripforce-core`: configuration, stage
//! commands, reports and run manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
