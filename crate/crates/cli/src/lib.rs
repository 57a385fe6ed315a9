//! The `probatlas` command line: synthetic cohorts, fusion, dictionary
//! training, personalised atlases and evaluation.

pub mod args;
pub mod commands;
pub mod manifest;
pub mod population;

pub use args::{Cli, Command};
pub use commands::{run, Failure};
