//! File formats, the command-line workflow and the HTTP edit service around
//! `memedit-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod service;

pub use error::{Error, Result};
