//! Command-line layer. Every run writes its outputs plus a manifest that can
//! replay it.

pub mod args;
pub mod commands;
pub mod output;

pub use args::{Cli, Command};
pub use commands::{run, Outcome};
