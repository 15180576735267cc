//! Command-line and HTTP front ends for `ballotaudit-core`.

pub mod args;
pub mod commands;
pub mod files;
pub mod service;
pub mod views;

pub use commands::{execute, CliError};
