//! Streaming 3-D reconstruction with a sliding-window state-space memory.

pub mod backbone;
pub mod error;
pub mod harness;
pub mod injector;
pub mod memory;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod ssm;

pub use error::{Error, Result};
