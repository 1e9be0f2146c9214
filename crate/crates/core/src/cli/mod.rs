//! Command surface tying the stages together. Each command takes a
//! [`RunConfig`], writes its effective config next to its outputs and
//! flags the output directory with `.incomplete` until it succeeds.

mod commands;
mod config;

pub use commands::*;
pub use config::*;
