//! File formats, run configuration and the command-line front end for
//! [`vidctrl_core`].

mod bytes;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset_file;
pub mod error;
pub mod images;
pub mod report;

pub use error::{Error, Result};
