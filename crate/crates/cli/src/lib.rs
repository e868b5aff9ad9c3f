//! Workbench plumbing behind the `gazesynth` binary: configuration, dataset
//! manifests on disk, external import and the four subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod import;
pub mod lock;
pub mod manifest;

pub use config::WorkbenchConfig;
pub use error::{CliError, CliResult};
