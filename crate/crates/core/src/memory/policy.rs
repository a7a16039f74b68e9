//! Eviction strategies. Each strategy sits behind [`EvictionPolicy`] and is
//! registered by name so configs and the CLI can select one at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk::ChunkKey;
use crate::error::{Error, Result};
use crate::memory::Device;

/// Per-chunk sorted access moments, one list per device.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentLists {
    lists: BTreeMap<(Device, ChunkKey), Vec<u32>>,
}

impl MomentLists {
    pub fn record(&mut self, device: Device, chunk: ChunkKey, moment: u32) {
        let list = self.lists.entry((device, chunk)).or_default();
        match list.last() {
            Some(&last) if last == moment => {}
            Some(&last) if last > moment => {
                if let Err(at) = list.binary_search(&moment) {
                    list.insert(at, moment);
                }
            }
            _ => list.push(moment),
        }
    }

    pub fn moments(&self, device: Device, chunk: ChunkKey) -> &[u32] {
        self.lists
            .get(&(device, chunk))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn chunk_count(&self) -> usize {
        self.lists.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(Device, ChunkKey), &Vec<u32>)> {
        self.lists.iter()
    }
}

/// Smallest recorded access moment strictly after `moment` on `device`.
pub fn next_use(chunk: ChunkKey, device: Device, moment: u32, lists: &MomentLists) -> Option<u32> {
    let m = lists.moments(device, chunk);
    let idx = m.partition_point(|&x| x <= moment);
    m.get(idx).copied()
}

pub struct EvictionContext<'a> {
    pub device: Device,
    pub moment: u32,
    pub moment_lists: Option<&'a MomentLists>,
}

pub trait EvictionPolicy: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Picks one victim among `candidates`, which are sorted in chunk-list
    /// order and all movable.
    fn pick_victim(&self, candidates: &[ChunkKey], ctx: &EvictionContext<'_>) -> Option<ChunkKey>;
}

/// Evicts in chunk-list order. Used by the warm-up iteration, before any
/// access statistics exist.
#[derive(Debug, Default, Clone, Copy)]
pub struct ListOrder;

impl EvictionPolicy for ListOrder {
    fn name(&self) -> &'static str {
        "list-order"
    }

    fn pick_victim(&self, candidates: &[ChunkKey], _ctx: &EvictionContext<'_>) -> Option<ChunkKey> {
        candidates.iter().min().copied()
    }
}

/// Evicts the chunk whose next access on this device is furthest away.
/// Chunks never used again win outright; ties go to the lowest chunk id.
#[derive(Debug, Default, Clone, Copy)]
pub struct LatestNextUse;

impl EvictionPolicy for LatestNextUse {
    fn name(&self) -> &'static str {
        "latest-next-use"
    }

    fn pick_victim(&self, candidates: &[ChunkKey], ctx: &EvictionContext<'_>) -> Option<ChunkKey> {
        let Some(lists) = ctx.moment_lists else {
            return candidates.iter().min().copied();
        };
        let distance =
            |k: &ChunkKey| next_use(*k, ctx.device, ctx.moment, lists).map_or(u64::MAX, u64::from);
        candidates
            .iter()
            .copied()
            .max_by(|a, b| distance(a).cmp(&distance(b)).then_with(|| b.cmp(a)))
    }
}

#[derive(Debug, Clone)]
pub struct PolicyRegistry {
    entries: BTreeMap<&'static str, Arc<dyn EvictionPolicy>>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl PolicyRegistry {
    pub fn empty() -> Self {
        PolicyRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(ListOrder));
        r.register(Arc::new(LatestNextUse));
        r
    }

    pub fn register(&mut self, policy: Arc<dyn EvictionPolicy>) {
        self.entries.insert(policy.name(), policy);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    /// Accepts `latest-next-use`, `LATEST_NEXT_USE`, `latest_next_use`.
    pub fn get(&self, name: &str) -> Result<Arc<dyn EvictionPolicy>> {
        let norm = name.trim().to_ascii_lowercase().replace('_', "-");
        self.entries
            .get(norm.as_str())
            .cloned()
            .ok_or_else(|| Error::UnknownName {
                kind: "eviction strategy",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}
