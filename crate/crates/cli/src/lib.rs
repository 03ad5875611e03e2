//! Command-line front end: configuration, record files and subcommands.

pub mod commands;
pub mod config;
pub mod records;
