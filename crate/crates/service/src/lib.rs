//! Command-line tools and the live frame server.

pub mod cli;
pub mod config;
pub mod outputs;
pub mod protocol;
pub mod server;
pub mod session;
