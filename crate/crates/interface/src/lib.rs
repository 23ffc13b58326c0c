//! Command-line front end and review HTTP API for a conceptpath workspace.

pub mod api;
pub mod cli;
pub mod commands;
pub mod net;
