//! Device pools and the chunk memory manager: fetch, evict, clean-copy
//! shadows and the transfer ledger.

pub mod oracle;
pub mod policy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::chunk::{chunk_movability, ChunkKey, ChunkStore, Movability};
use crate::error::{Error, OomInfo, Result};
pub use oracle::{oracle_min_transfers, simulate_policy_fetches};
pub use policy::{
    next_use, EvictionContext, EvictionPolicy, LatestNextUse, ListOrder, MomentLists,
    PolicyRegistry,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Device {
    Cpu,
    Gpu,
}

impl Device {
    pub fn other(self) -> Device {
        match self {
            Device::Cpu => Device::Gpu,
            Device::Gpu => Device::Cpu,
        }
    }
}

impl fmt::Display for Device {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Device::Cpu => "CPU",
            Device::Gpu => "GPU",
        })
    }
}

/// One memory tier. `used = chunk + non_model + reserved`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DevicePool {
    pub device: Device,
    pub capacity_bytes: u64,
    /// Resident chunk payloads, clean-copy shadows included.
    pub chunk_bytes: u64,
    pub non_model_bytes: u64,
    /// Staging buffers, gradient temporaries and the embedding.
    pub reserved_bytes: u64,
    pub peak_used: u64,
}

impl DevicePool {
    pub fn new(device: Device, capacity_bytes: u64) -> Self {
        DevicePool {
            device,
            capacity_bytes,
            chunk_bytes: 0,
            non_model_bytes: 0,
            reserved_bytes: 0,
            peak_used: 0,
        }
    }

    pub fn used(&self) -> u64 {
        self.chunk_bytes + self.non_model_bytes + self.reserved_bytes
    }

    pub fn free(&self) -> u64 {
        self.capacity_bytes.saturating_sub(self.used())
    }

    fn touch(&mut self) {
        self.peak_used = self.peak_used.max(self.used());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferReason {
    Fetch,
    Evict,
    AdamCopy,
    Collective,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub moment: u32,
    pub chunk: ChunkKey,
    pub src: Device,
    pub dst: Device,
    pub bytes: u64,
    pub reason: TransferReason,
}

#[derive(Debug, Clone)]
pub struct MemoryManager {
    gpu: DevicePool,
    cpu: DevicePool,
    /// GPU-resident chunks whose identical payload is still held on the CPU.
    shadows: BTreeSet<ChunkKey>,
    pins: BTreeMap<ChunkKey, u32>,
    /// Optimizer-state chunks the placement plan keeps on the GPU.
    placement_pinned: BTreeSet<ChunkKey>,
    ledger: Vec<TransferRecord>,
    moment: u32,
    policy: Arc<dyn EvictionPolicy>,
    moment_lists: Option<Arc<MomentLists>>,
    gpu_soft_limit: Option<u64>,
    evictions: u64,
}

impl MemoryManager {
    pub fn new(gpu_bytes: u64, cpu_bytes: u64, policy: Arc<dyn EvictionPolicy>) -> Self {
        MemoryManager {
            gpu: DevicePool::new(Device::Gpu, gpu_bytes),
            cpu: DevicePool::new(Device::Cpu, cpu_bytes),
            shadows: BTreeSet::new(),
            pins: BTreeMap::new(),
            placement_pinned: BTreeSet::new(),
            ledger: Vec::new(),
            moment: 0,
            policy,
            moment_lists: None,
            gpu_soft_limit: None,
            evictions: 0,
        }
    }

    pub fn pool(&self, device: Device) -> &DevicePool {
        match device {
            Device::Cpu => &self.cpu,
            Device::Gpu => &self.gpu,
        }
    }

    fn pool_mut(&mut self, device: Device) -> &mut DevicePool {
        match device {
            Device::Cpu => &mut self.cpu,
            Device::Gpu => &mut self.gpu,
        }
    }

    pub fn policy(&self) -> &Arc<dyn EvictionPolicy> {
        &self.policy
    }

    pub fn set_policy(&mut self, policy: Arc<dyn EvictionPolicy>) {
        self.policy = policy;
    }

    pub fn set_moment_lists(&mut self, lists: Option<Arc<MomentLists>>) {
        self.moment_lists = lists;
    }

    /// Eviction target below the GPU capacity, used during warm-up.
    pub fn set_gpu_soft_limit(&mut self, limit: Option<u64>) {
        self.gpu_soft_limit = limit;
    }

    pub fn set_placement_pinned(&mut self, keys: BTreeSet<ChunkKey>) {
        self.placement_pinned = keys;
    }

    pub fn is_placement_pinned(&self, key: ChunkKey) -> bool {
        self.placement_pinned.contains(&key)
    }

    pub fn moment(&self) -> u32 {
        self.moment
    }

    pub fn set_moment(&mut self, moment: u32) {
        self.moment = moment;
    }

    pub fn ledger(&self) -> &[TransferRecord] {
        &self.ledger
    }

    pub fn eviction_count(&self) -> u64 {
        self.evictions
    }

    pub fn has_shadow(&self, key: ChunkKey) -> bool {
        self.shadows.contains(&key)
    }

    pub fn reset_peaks(&mut self) {
        self.gpu.peak_used = self.gpu.used();
        self.cpu.peak_used = self.cpu.used();
    }

    pub fn pin(&mut self, key: ChunkKey) {
        *self.pins.entry(key).or_default() += 1;
    }

    pub fn unpin(&mut self, key: ChunkKey) {
        if let Some(n) = self.pins.get_mut(&key) {
            *n -= 1;
            if *n == 0 {
                self.pins.remove(&key);
            }
        }
    }

    pub fn is_pinned(&self, key: ChunkKey) -> bool {
        self.pins.contains_key(&key)
    }

    fn record(
        &mut self,
        chunk: ChunkKey,
        src: Device,
        dst: Device,
        bytes: u64,
        reason: TransferReason,
    ) {
        self.ledger.push(TransferRecord {
            moment: self.moment,
            chunk,
            src,
            dst,
            bytes,
            reason,
        });
    }

    /// Records a transfer that does not change residency, such as the ADAM
    /// gradient copy.
    pub fn record_copy(
        &mut self,
        chunk: ChunkKey,
        src: Device,
        dst: Device,
        bytes: u64,
        reason: TransferReason,
    ) {
        if src != dst && bytes > 0 {
            self.record(chunk, src, dst, bytes, reason);
        }
    }

    fn oom(&self, device: Device, needed_bytes: u64, what: &str) -> Error {
        Error::OutOfMemory(OomInfo {
            moment: self.moment,
            device,
            needed_bytes,
            free_bytes: self.pool(device).free(),
            what: what.to_string(),
        })
    }

    /// Places a chunk without a transfer, on `preferred` if it fits and on
    /// the other tier otherwise.
    pub fn place_initial(
        &mut self,
        store: &mut ChunkStore,
        key: ChunkKey,
        preferred: Device,
    ) -> Result<Device> {
        let chunk = store.get(key);
        if chunk.phantom || chunk.resident.is_some() {
            return Ok(chunk.resident.unwrap_or(preferred));
        }
        let bytes = chunk.bytes();
        let device = if self.pool(preferred).free() >= bytes {
            preferred
        } else if self.pool(preferred.other()).free() >= bytes {
            preferred.other()
        } else {
            return Err(self.oom(preferred, bytes, &format!("placing {key}")));
        };
        let pool = self.pool_mut(device);
        pool.chunk_bytes += bytes;
        pool.touch();
        store.get_mut(key).resident = Some(device);
        Ok(device)
    }

    /// Movable resident chunks on `device`, in list order.
    pub fn candidates(&self, store: &ChunkStore, device: Device) -> Vec<ChunkKey> {
        store
            .chunks()
            .filter(|c| c.resident == Some(device) && !c.phantom)
            .filter(|c| !self.pins.contains_key(&c.key))
            .filter(|c| !(device == Device::Gpu && self.placement_pinned.contains(&c.key)))
            .filter(|c| {
                matches!(
                    chunk_movability(c),
                    Movability::Movable | Movability::Releasable
                )
            })
            .map(|c| c.key)
            .collect()
    }

    fn eviction_target(&self, device: Device) -> u64 {
        let cap = self.pool(device).capacity_bytes;
        match (device, self.gpu_soft_limit) {
            (Device::Gpu, Some(limit)) => limit.min(cap),
            _ => cap,
        }
    }

    /// Evicts chunks from `device` until `bytes_needed` more fit. Returns the
    /// chunks moved or dropped.
    pub fn evict_for(
        &mut self,
        store: &mut ChunkStore,
        device: Device,
        bytes_needed: u64,
        what: &str,
    ) -> Result<Vec<ChunkKey>> {
        self.evict_inner(store, device, bytes_needed, what, true)
    }

    /// `spill` allows CPU chunks to move to the GPU. Making CPU room for a
    /// GPU victim must not, or the two tiers trade chunks forever.
    fn evict_inner(
        &mut self,
        store: &mut ChunkStore,
        device: Device,
        bytes_needed: u64,
        what: &str,
        spill: bool,
    ) -> Result<Vec<ChunkKey>> {
        let mut evicted = Vec::new();
        if bytes_needed == 0 {
            return Ok(evicted);
        }
        let target = self.eviction_target(device);
        while self.pool(device).used() + bytes_needed > target {
            if device == Device::Cpu {
                if let Some(&shadow) = self.shadows.iter().next() {
                    self.shadows.remove(&shadow);
                    self.cpu.chunk_bytes -= store.get(shadow).bytes();
                    continue;
                }
            }
            let mut candidates = self.candidates(store, device);
            if !spill {
                candidates.retain(|&k| chunk_movability(store.get(k)) == Movability::Releasable);
            }
            let ctx = EvictionContext {
                device,
                moment: self.moment,
                moment_lists: self.moment_lists.as_deref(),
            };
            let Some(victim) = self.policy.pick_victim(&candidates, &ctx) else {
                break;
            };
            if !self.move_out(store, victim, device, spill)? {
                break;
            }
            evicted.push(victim);
        }
        if self.pool(device).used() + bytes_needed > self.pool(device).capacity_bytes {
            return Err(self.oom(device, bytes_needed, what));
        }
        Ok(evicted)
    }

    /// Moves one chunk off `device`. Returns false when the other tier has
    /// no room and the chunk cannot leave.
    fn move_out(
        &mut self,
        store: &mut ChunkStore,
        key: ChunkKey,
        device: Device,
        spill: bool,
    ) -> Result<bool> {
        let chunk = store.get(key);
        let bytes = chunk.bytes();
        if chunk_movability(chunk) == Movability::Releasable {
            self.release_payload(store, key);
            self.evictions += 1;
            return Ok(true);
        }
        match device {
            Device::Gpu => {
                if self.shadows.remove(&key) {
                    self.gpu.chunk_bytes -= bytes;
                } else {
                    self.pin(key);
                    let room = self.evict_inner(
                        store,
                        Device::Cpu,
                        bytes,
                        &format!("evicting {key}"),
                        false,
                    );
                    self.unpin(key);
                    room?;
                    self.gpu.chunk_bytes -= bytes;
                    self.cpu.chunk_bytes += bytes;
                    self.record(key, Device::Gpu, Device::Cpu, bytes, TransferReason::Evict);
                }
                store.get_mut(key).resident = Some(Device::Cpu);
            }
            Device::Cpu => {
                if !spill || self.gpu.used() + bytes > self.eviction_target(Device::Gpu) {
                    return Ok(false);
                }
                self.cpu.chunk_bytes -= bytes;
                self.gpu.chunk_bytes += bytes;
                self.record(key, Device::Cpu, Device::Gpu, bytes, TransferReason::Evict);
                store.get_mut(key).resident = Some(Device::Gpu);
            }
        }
        self.evictions += 1;
        self.cpu.touch();
        self.gpu.touch();
        Ok(true)
    }

    /// Makes `key` resident on `target`. Returns the bytes transferred.
    pub fn fetch_chunk(
        &mut self,
        store: &mut ChunkStore,
        key: ChunkKey,
        target: Device,
        reason: TransferReason,
    ) -> Result<u64> {
        let chunk = store.get(key);
        if chunk.phantom {
            return Ok(0);
        }
        let bytes = chunk.bytes();
        match chunk.resident {
            Some(d) if d == target => Ok(0),
            None => {
                self.allocate_payload(store, key, target)?;
                Ok(0)
            }
            Some(src) => {
                if target == Device::Cpu && self.shadows.remove(&key) {
                    self.gpu.chunk_bytes -= bytes;
                    store.get_mut(key).resident = Some(Device::Cpu);
                    return Ok(0);
                }
                self.pin(key);
                let room = self.evict_for(store, target, bytes, &format!("fetching {key}"));
                self.unpin(key);
                room?;
                self.record(key, src, target, bytes, reason);
                if target == Device::Gpu {
                    self.gpu.chunk_bytes += bytes;
                    self.shadows.insert(key);
                    store.get_mut(key).dirty = false;
                } else {
                    self.gpu.chunk_bytes -= bytes;
                    self.cpu.chunk_bytes += bytes;
                }
                store.get_mut(key).resident = Some(target);
                self.pool_mut(target).touch();
                Ok(bytes)
            }
        }
    }

    /// Allocates a fresh payload with no source copy (collective arrival,
    /// re-initialization).
    pub fn allocate_payload(
        &mut self,
        store: &mut ChunkStore,
        key: ChunkKey,
        device: Device,
    ) -> Result<()> {
        let chunk = store.get(key);
        if chunk.phantom || chunk.resident.is_some() {
            return Ok(());
        }
        let bytes = chunk.bytes();
        self.pin(key);
        let room = self.evict_for(store, device, bytes, &format!("allocating {key}"));
        self.unpin(key);
        room?;
        let pool = self.pool_mut(device);
        pool.chunk_bytes += bytes;
        pool.touch();
        let c = store.get_mut(key);
        c.resident = Some(device);
        c.dirty = true;
        Ok(())
    }

    pub fn release_payload(&mut self, store: &mut ChunkStore, key: ChunkKey) {
        let chunk = store.get(key);
        let bytes = chunk.bytes();
        if let Some(d) = chunk.resident {
            self.pool_mut(d).chunk_bytes -= bytes;
        }
        if self.shadows.remove(&key) {
            self.cpu.chunk_bytes -= bytes;
        }
        store.get_mut(key).resident = None;
    }

    /// The payload changed; any clean copy on the other tier is stale.
    pub fn mark_dirty(&mut self, store: &mut ChunkStore, key: ChunkKey) {
        if self.shadows.remove(&key) {
            self.cpu.chunk_bytes -= store.get(key).bytes();
        }
        store.get_mut(key).dirty = true;
    }

    pub fn reserve(
        &mut self,
        store: &mut ChunkStore,
        device: Device,
        bytes: u64,
        what: &str,
    ) -> Result<()> {
        self.evict_for(store, device, bytes, what)?;
        let pool = self.pool_mut(device);
        pool.reserved_bytes += bytes;
        pool.touch();
        Ok(())
    }

    pub fn release_reserved(&mut self, device: Device, bytes: u64) {
        let pool = self.pool_mut(device);
        pool.reserved_bytes = pool.reserved_bytes.saturating_sub(bytes);
    }

    /// Sets the GPU non-model charge, evicting chunks if it grew.
    pub fn set_non_model(&mut self, store: &mut ChunkStore, bytes: u64) -> Result<()> {
        let current = self.gpu.non_model_bytes;
        if bytes > current {
            self.evict_for(
                store,
                Device::Gpu,
                bytes - current,
                "allocating non-model data",
            )?;
        }
        self.gpu.non_model_bytes = bytes;
        self.gpu.touch();
        Ok(())
    }

    /// Sum of chunk payload bytes per device, recomputed from the store.
    pub fn audit(&self, store: &ChunkStore) -> Result<()> {
        let mut sums = [0u64; 2];
        for c in store.chunks() {
            if let Some(d) = c.resident {
                sums[d as usize] += c.bytes();
            }
        }
        for &k in &self.shadows {
            if store.get(k).resident != Some(Device::Gpu) {
                return Err(Error::Invariant(format!("shadow {k} is not GPU resident")));
            }
            sums[Device::Cpu as usize] += store.get(k).bytes();
        }
        for d in [Device::Cpu, Device::Gpu] {
            let pool = self.pool(d);
            if pool.chunk_bytes != sums[d as usize] {
                return Err(Error::Invariant(format!(
                    "{d} pool counts {} chunk bytes, store holds {}",
                    pool.chunk_bytes, sums[d as usize]
                )));
            }
            if pool.used() > pool.capacity_bytes {
                return Err(Error::Invariant(format!("{d} pool over capacity")));
            }
        }
        Ok(())
    }
}
