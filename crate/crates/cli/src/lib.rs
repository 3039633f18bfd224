//! Command-line harness around `mixttt-core`.

pub mod commands;
pub mod config;
