//! File formats, run logging and command implementations for the `acl` tool.

pub mod aclt;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod model_io;
pub mod runlog;

pub use error::{CliError, FormatError};
