//! File formats, the experiment runner and the `kase` command line on top of
//! [`kase_core`].

pub mod checkpoint;
pub mod dataset;
mod error;
pub mod experiment;
pub mod export;

pub use error::{LabError, Result};
