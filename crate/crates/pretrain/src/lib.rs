//! File formats, the pretraining loop and the `rtdp` command line around
//! [`rtd_core`].

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod trainer;

pub use error::{Error, Result};
