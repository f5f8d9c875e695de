//! Command implementations behind the `delta` binary.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gen;
pub mod infer;
pub mod inspect;
pub mod manifest;
pub mod train;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
