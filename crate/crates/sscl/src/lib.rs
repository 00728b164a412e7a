//! Datasets on disk, checkpoints, run configuration and the experiment
//! pipeline around [`sscl_core`].

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{Arm, RunConfig};
pub use error::{Error, Result};
pub use sscl_core;
