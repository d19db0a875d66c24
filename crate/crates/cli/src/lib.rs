//! Command-line front end: configuration, the cached stage pipeline and
//! parameter sweeps.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod sweep;
pub mod synth_text;

pub use commands::{exit_code, run, Cli};
