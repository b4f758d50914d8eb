//! Command-line front end for privlora.
//!
//! Commands load a JSON [`config::RunConfig`], call into `privlora-core`
//! and persist CSV and JSON outputs. Exit codes: 0 success, 2 config error,
//! 3 infeasible privacy budget, 4 missing artifact, 5 diverged run, 1 other.

pub mod calibrate;
pub mod commands;
pub mod config;
pub mod error;
pub mod histogram;
pub mod io;
pub mod payload;
pub mod record;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};
