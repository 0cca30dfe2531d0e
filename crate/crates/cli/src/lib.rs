//! Command-line front end: config parsing and the `disc` subcommands.

pub mod commands;
pub mod config;

pub use config::RunConfig;
