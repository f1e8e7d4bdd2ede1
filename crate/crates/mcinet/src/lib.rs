//! File formats, image decoding, reports and the `mcinet` command line on
//! top of `mcinet-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod imageio;
pub mod manifest;
pub mod report;
pub mod synth;

pub use error::{AppError, Result};
