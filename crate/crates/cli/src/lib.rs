//! Pipeline orchestration for the `memmcl` command: synthetic task
//! generation, expert training, weak-data extraction, two-stage evolutionary
//! merging, curriculum evaluation and reporting.

pub mod commands;
pub mod config;
pub mod error;
pub mod layout;

pub use commands::Context;
pub use config::PipelineConfig;
pub use error::CliError;
