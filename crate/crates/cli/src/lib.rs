//! Command implementations behind the `lightcone` binary: simulate the test
//! automaton, fit a model, forecast, generate from a model, and benchmark
//! mixed against hard estimation. Every command writes its resolved
//! configuration next to its outputs.

pub mod bench;
pub mod commands;
pub mod config;
mod error;

pub use error::{CliError, CliResult};
