//! Deterministic simulator for chunk-based heterogeneous (CPU + GPU) memory
//! management of large transformer training.
//!
//! Model data (fp16 params, fp32 params, momentum, variance) is packed into
//! fixed-size chunks. Tensors inside chunks run a small state machine, and the
//! state of a chunk's tensors decides where the chunk may live. A warm-up
//! iteration profiles non-model memory, then later iterations use the profile
//! to evict chunks and place optimizer state on the GPU. Static-partition,
//! pure data-parallel and layer-streaming baselines are modeled analytically
//! for comparison.

pub mod baselines;
pub mod chunk;
pub mod config;
pub mod dp;
pub mod engine;
pub mod error;
pub mod fsm;
pub mod memory;
pub mod profiler;
pub mod report;
pub mod scenario;
pub mod schema;
pub mod sim;
pub mod strategy;

pub use error::{Error, Result};
