//! Command-line front end for the `elastic-dllm` library.
//!
//! Commands: `train`, `decode`, `verify`, `trace-eos`, `dump-attn`,
//! `dump-hidden` and `cost`. Exit codes are 0 on success, 1 on runtime or
//! verification failure and 2 on usage or configuration errors.

pub mod commands;
pub mod config;

pub use commands::{command, run, CliError};
pub use config::{RunConfig, CONFIG_ENV};
