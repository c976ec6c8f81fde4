//! Configuration, presets, runners and output formats for the `stelab`
//! command-line tool.

pub mod cli;
pub mod compare;
pub mod config;
pub mod csvio;
pub mod error;
pub mod figures;
pub mod manifest;
pub mod plot;
pub mod presets;
pub mod runner;
