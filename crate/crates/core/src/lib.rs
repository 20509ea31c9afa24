//! Visual-token information metric, information-horizon detection and
//! hybrid pruning schedules on a small multimodal transformer.

pub mod efficiency;
pub mod engine;
pub mod error;
pub mod harness;
pub mod information;
pub mod pruning;
pub mod tensor;

pub use error::{Error, Result};
