//! Command-line front end: flag parsing, the subcommands and the shared
//! generate/train/evaluate pipeline.

pub mod args;
pub mod commands;
pub mod experiment;
