use std::fmt;

use crate::chunk::{ChunkKey, TensorState};
use crate::fsm::Trigger;
use crate::memory::Device;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OomInfo {
    pub moment: u32,
    pub device: Device,
    pub needed_bytes: u64,
    pub free_bytes: u64,
    pub what: String,
}

impl fmt::Display for OomInfo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} out of memory at moment {} while {}: needed {} bytes, {} free after eviction",
            self.device, self.moment, self.what, self.needed_bytes, self.free_bytes
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("tensor {index} has {numel} elements, larger than chunk capacity {capacity}")]
    TensorTooLarge {
        index: usize,
        numel: u64,
        capacity: u64,
    },

    #[error("illegal transition of tensor {tensor} in {chunk}: {from:?} --{trigger:?}-->")]
    IllegalTransition {
        chunk: ChunkKey,
        tensor: u32,
        from: TensorState,
        trigger: Trigger,
    },

    #[error("{0}")]
    OutOfMemory(OomInfo),

    #[error("moment {moment} out of range (timeline has {len} moments)")]
    MomentOutOfRange { moment: usize, len: usize },

    #[error("no sample recorded for moment {0}")]
    MissingSample(u32),

    #[error("oracle instance too large: {0}")]
    InstanceTooLarge(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn is_oom(&self) -> bool {
        matches!(self, Error::OutOfMemory(_))
    }
}
