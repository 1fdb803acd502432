//! Command-line runner: JSON run configs, reproducibility manifests, the
//! fixture preset, and one function per command.

pub mod commands;
pub mod config;
pub mod error;
pub mod fixture;
pub mod manifest;

pub use commands::{execute, rerun, run_command};
pub use config::{Command, RunConfig};
pub use error::{CliError, ErrorKind};
pub use fixture::Preset;
pub use manifest::RunManifest;
