//! Configuration, command-line workflows and the HTTP session service.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
