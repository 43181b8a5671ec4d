//! Command-line front end: TOML model configurations, CSV data, JSON model
//! archives and study outputs.

pub mod archive;
pub mod commands;
pub mod config;
pub mod data;
