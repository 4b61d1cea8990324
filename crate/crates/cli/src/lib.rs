//! Command implementations behind the `spectdiff` binary.
//!
//! Every command writes into its own output directory with a
//! `manifest.txt` listing the config hash and the sha256 of each file.

pub mod commands;
pub mod dataset;
pub mod error;

pub use commands::{
    cmd_evaluate, cmd_reconstruct, cmd_simulate, cmd_sweep, cmd_train, Method, PriorKind, ReconstructArgs, SweepArgs, Variant,
};
pub use error::{CliError, CliResult};
pub use spectdiff_core::config::RunConfig;
