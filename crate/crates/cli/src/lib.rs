//! Configuration, reports and subcommands of the `nfdistill` binary.

pub mod commands;
pub mod config;
pub mod report;
