//! Front end for the pulse-optimization library: config parsing, subcommand
//! drivers, and artifact writers. The `qoc` binary is a thin wrapper over
//! [`commands`].

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::{
    run_optimize, run_probe, run_simulate, run_spectrum, run_verify, Outcome, RunContext,
};
pub use config::{AlphaFile, Problem, RunConfig};
