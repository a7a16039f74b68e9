//! Chunk-based data parallelism: ownership, communication groups, the
//! collective ledger and closed-form volume models.

use std::collections::BTreeMap;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::chunk::{ChunkKey, ChunkStore, ListKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelConfig {
    pub nproc: u32,
    pub rank: u32,
    pub gpu_bytes: u64,
    pub per_process_cpu_bytes: u64,
}

impl ParallelConfig {
    /// Every process gets a full GPU and `1/nproc` of the host memory.
    pub fn new(nproc: u32, gpu_bytes: u64, total_cpu_bytes: u64) -> Result<Self> {
        if nproc == 0 {
            return Err(Error::InvalidDimension("nproc must be at least 1".into()));
        }
        Ok(ParallelConfig {
            nproc,
            rank: 0,
            gpu_bytes,
            per_process_cpu_bytes: total_cpu_bytes / nproc as u64,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GroupPhase {
    Idle,
    Gathered,
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommGroup {
    pub group_id: u32,
    /// fp16 chunks, one per process, in rank order.
    pub members: Vec<ChunkKey>,
    pub phase_state: GroupPhase,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub nproc: u32,
    pub owner: BTreeMap<ChunkKey, u32>,
    pub groups: Vec<CommGroup>,
}

impl Partition {
    pub fn group_of(&self, pos: u32) -> u32 {
        pos / self.nproc
    }

    pub fn local_positions(&self, rank: u32) -> Vec<u32> {
        self.owner
            .iter()
            .filter(|(k, &o)| k.kind == ListKind::ParamFp16 && o == rank)
            .map(|(k, _)| k.pos)
            .collect()
    }
}

/// Pads every list to a multiple of `p` and assigns chunk `i` to process
/// `i mod p`. Groups are runs of `p` consecutive fp16 chunks.
pub fn partition_chunks(store: &mut ChunkStore, p: u32) -> Partition {
    let p = p.max(1);
    store.pad_and_assign_owners(p);
    let owner = store.chunks().map(|c| (c.key, c.owner)).collect();
    let groups = (0..store.positions() / p)
        .map(|g| CommGroup {
            group_id: g,
            members: (0..p)
                .map(|r| ChunkKey::new(ListKind::ParamFp16, g * p + r))
                .collect(),
            phase_state: GroupPhase::Idle,
        })
        .collect();
    Partition {
        nproc: p,
        owner,
        groups,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollectiveKind {
    AllgatherFwd,
    AllgatherBwd,
    ReduceScatter,
    RegatherRefwd,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::AllgatherFwd => "allgather_fwd",
            CollectiveKind::AllgatherBwd => "allgather_bwd",
            CollectiveKind::ReduceScatter => "reduce_scatter",
            CollectiveKind::RegatherRefwd => "regather_refwd",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollectiveRecord {
    pub iteration: u32,
    pub moment: u32,
    pub group_id: u32,
    pub kind: CollectiveKind,
    /// Per-process wire bytes in the ring convention: `(p-1)` member chunks.
    pub bytes: u64,
    pub includes_padding: bool,
}

/// Per-process wire bytes of one all-gather or reduce-scatter over a group of
/// `p` chunks of `chunk_bytes` each.
pub fn group_collective_bytes(p: u32, chunk_bytes: u64) -> u64 {
    (p.max(1) as u64 - 1) * chunk_bytes
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scheme {
    ChunkCollective,
    BroadcastBased,
}

/// `6(p-1)/p · M` for chunk collectives, `10(p-1)/p · M` for the
/// broadcast-based scheme.
pub fn closed_form_volume(p: u32, m: u64, scheme: Scheme) -> Ratio<u128> {
    let p = p.max(1) as u128;
    let factor = match scheme {
        Scheme::ChunkCollective => 6,
        Scheme::BroadcastBased => 10,
    };
    Ratio::new(factor * (p - 1) * m as u128, p)
}

pub fn broadcast_to_chunk_ratio(p: u32, m: u64) -> Option<Ratio<u128>> {
    let chunk = closed_form_volume(p, m, Scheme::ChunkCollective);
    if chunk == Ratio::from_integer(0) {
        return None;
    }
    Some(closed_form_volume(p, m, Scheme::BroadcastBased) / chunk)
}
