//! Command line, config files and on-disk formats for `levi-core` experiments.

pub mod cli;
pub mod config;
pub mod formats;
pub mod runner;
