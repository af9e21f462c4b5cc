//! Tick parsing, file formats and the `fpt` command-line pipeline built on
//! [`fpt_core`].

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod parse;
pub mod pipeline;

pub use config::{FlagOverrides, RunConfig};
pub use error::{CliError, Result};
