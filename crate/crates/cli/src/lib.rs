//! Command-line front end: configuration, subcommands, reports and SVG
//! rendering.

pub mod commands;
pub mod config;
pub mod ext;
pub mod render;
pub mod report;
