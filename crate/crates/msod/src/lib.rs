//! File formats, dataset directories, reports and the command-line front
//! end around [`msod_core`].

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pnm;
pub mod report;

pub use error::{Error, Result};
