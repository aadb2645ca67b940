//! Command-line driver for `newscap-core`: run configuration, JSONL and
//! JSON file formats, versioned checkpoints, and the subcommands.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod io;

pub use error::{CliError, Result};
