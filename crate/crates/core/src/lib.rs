//! Filter pruning toolkit: a small CPU training stack for CNNs plus
//! approximated oracle filter pruning (multi-path masking, isolated damage
//! scoring, binary filter search) and reference importance metrics.

pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod graph;
pub mod harness;
pub mod metrics;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
