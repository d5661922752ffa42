//! Library behind the `switchkd` binary: the run document, one function per
//! subcommand, resumable sweeps and their CSV schema.

pub mod ablate;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
