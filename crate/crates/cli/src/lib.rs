//! Command implementations behind the `dada` binary: data generation,
//! training, evaluation, the ablation suite and its reports.

pub mod commands;
pub mod error;
pub mod manifest;
pub mod plot;
pub mod suite;

pub use error::{CliError, Result};
