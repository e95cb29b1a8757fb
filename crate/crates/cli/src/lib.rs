//! Command-line layer: file formats, run directories, ablation grids and
//! the `magicnet` entry point.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod metrics;
pub mod mgv;
pub mod preview;
pub mod run;
pub mod selftest;

pub use error::{CliError, Result};

/// Code version echoed into every manifest.
pub fn version_string() -> String {
    format!("magicnet {}", env!("CARGO_PKG_VERSION"))
}
