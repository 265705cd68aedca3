//! Front end for the `pipefreeze` binary.

pub mod app;
pub mod commands;
pub mod config;
pub mod error;
pub mod gantt;

pub use app::{run, Cli};
pub use error::CliError;
