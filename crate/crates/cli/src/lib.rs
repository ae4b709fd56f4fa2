//! Command-line tools, dataset plumbing and the calibration session service.

pub mod cli;
pub mod commands;
pub mod error;
pub mod frames;
pub mod server;
pub mod session;

pub use cli::{run, Cli};
pub use error::AppError;
