//! File formats, run configuration and commands around `koopkal-core`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod csvio;
pub mod error;
pub mod selftest;

pub use error::{CliError, Result};
