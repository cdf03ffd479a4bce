//! File formats, HTTP adapters, run directories and the command line for
//! `citeprobe`. The algorithms live in `citeprobe_core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod io;
pub mod report;
pub mod runner;
pub mod synth;

pub use config::{ConfigLayer, RunConfig};
pub use error::{DataError, HarnessError};
