//! Command-line harness for the flowcast toolkit.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod svg;

pub use commands::{AblationKind, Run};
pub use config::RunConfig;
pub use error::{Category, CliError, CliResult};
