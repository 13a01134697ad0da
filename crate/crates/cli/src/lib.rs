//! Command-line entrypoint and HTTP query service.

pub mod commands;
pub mod service;
