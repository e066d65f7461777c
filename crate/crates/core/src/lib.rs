//! Discrete-event simulation of write stalls in LSM-tree storage engines.

pub mod config;
pub mod error;
pub mod harness;
pub mod kernel;
pub mod latency;
pub mod model;
pub mod oracles;
pub mod policy;
pub mod presets;
pub mod scheduler;
pub mod verify;
pub mod workload;

pub use error::{Error, Result};
