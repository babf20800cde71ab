//! Std companion to `dataselect-core`: file formats, run configuration,
//! parallel scoring, and the `dataselect` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod pipeline;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
