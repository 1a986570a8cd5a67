//! File formats, dataset loading and experiment drivers on top of
//! `onh-core`.

mod bytes;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod tables;
pub mod volume;

pub use error::{Error, Result};
