//! Command-line front end: configuration, run directories and the
//! experiment commands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
