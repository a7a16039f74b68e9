//! Warm-up profiling, chunkable memory and the device-aware placement plan
//! for optimizer-state chunks and the embedding.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use crate::chunk::{ChunkKey, ChunkStore, ListKind};
use crate::engine::{Engine, IterationReport};
use crate::error::{Error, Result};
use crate::memory::{Device, ListOrder, MomentLists};
use crate::schema::{ModelSchema, OperatorEvent, Phase, FP16_BYTES};

pub const DEFAULT_LIMIT_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MomentSample {
    pub moment_index: u32,
    pub device: Device,
    pub capacity: u64,
    /// Total bytes in use.
    pub r: u64,
    /// Bytes allocated by the chunk manager: chunks plus its buffers.
    pub c: u64,
    pub non_model: u64,
}

/// GPU and CPU samples for every moment of an iteration.
pub fn samples_from(
    report: &IterationReport,
    gpu_capacity: u64,
    cpu_capacity: u64,
) -> Vec<MomentSample> {
    let mut out = Vec::with_capacity(report.moments.len() * 2);
    for m in &report.moments {
        let gpu_c = m.gpu_chunk_bytes + m.gpu_reserved_bytes;
        out.push(MomentSample {
            moment_index: m.moment,
            device: Device::Gpu,
            capacity: gpu_capacity,
            r: m.gpu_used_bytes,
            c: gpu_c,
            non_model: m.gpu_used_bytes - gpu_c,
        });
        let cpu_c = m.cpu_chunk_bytes + m.cpu_reserved_bytes;
        out.push(MomentSample {
            moment_index: m.moment,
            device: Device::Cpu,
            capacity: cpu_capacity,
            r: m.cpu_used_bytes,
            c: cpu_c,
            non_model: m.cpu_used_bytes - cpu_c,
        });
    }
    out
}

pub fn chunkable_memory(device: Device, moment: u32, samples: &[MomentSample]) -> Result<u64> {
    samples
        .iter()
        .find(|s| s.device == device && s.moment_index == moment)
        .map(|s| s.capacity.saturating_sub(s.non_model))
        .ok_or(Error::MissingSample(moment))
}

#[derive(Debug, Clone)]
pub struct WarmupProfile {
    pub samples: Vec<MomentSample>,
    pub moment_lists: Arc<MomentLists>,
    pub peak_non_model: u64,
    pub working_set_bytes: u64,
    pub report: IterationReport,
}

impl WarmupProfile {
    pub fn feasible(&self) -> bool {
        self.report.feasible
    }
}

/// Runs one iteration with list-order eviction while holding GPU usage
/// under `limit_fraction` of capacity whenever eviction allows it.
pub fn warmup_iteration(engine: &mut Engine, limit_fraction: f64) -> Result<WarmupProfile> {
    let gpu_cap = engine.mm.pool(Device::Gpu).capacity_bytes;
    let cpu_cap = engine.mm.pool(Device::Cpu).capacity_bytes;
    let saved_policy = engine.mm.policy().clone();
    engine.mm.set_policy(Arc::new(ListOrder));
    engine.mm.set_moment_lists(None);
    engine
        .mm
        .set_gpu_soft_limit(Some((gpu_cap as f64 * limit_fraction).floor() as u64));
    let report = engine.run_iteration();
    engine.mm.set_gpu_soft_limit(None);
    engine.mm.set_policy(saved_policy);
    let report = report?;
    let samples = samples_from(&report, gpu_cap, cpu_cap);
    let peak_non_model = samples
        .iter()
        .filter(|s| s.device == Device::Gpu)
        .map(|s| s.non_model)
        .max()
        .unwrap_or(0);
    Ok(WarmupProfile {
        samples,
        moment_lists: Arc::new(report.moment_lists.clone()),
        peak_non_model,
        working_set_bytes: report.working_set_bytes,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PlacementPlan {
    pub gpu_margin_bytes: u64,
    /// Optimizer-state chunks on the GPU, three per list position.
    pub os_chunks_on_gpu: u32,
    pub embedding_device: Device,
    /// Device of each local position's optimizer triplet.
    pub os_devices: BTreeMap<u32, Device>,
}

impl PlacementPlan {
    pub fn os_device(&self, pos: u32) -> Device {
        self.os_devices.get(&pos).copied().unwrap_or(Device::Cpu)
    }

    pub fn os_gpu_positions(&self) -> impl Iterator<Item = u32> + '_ {
        self.os_devices
            .iter()
            .filter(|(_, &d)| d == Device::Gpu)
            .map(|(&p, _)| p)
    }

    /// Fills the margin with optimizer triplets, lowest positions first.
    pub fn with_margin(
        margin: u64,
        local_positions: &[u32],
        store: &ChunkStore,
        embedding_device: Device,
    ) -> Self {
        let triplet: u64 = ListKind::OPTIMIZER
            .iter()
            .map(|&k| store.list(k).chunks.first().map_or(0, |c| c.bytes()))
            .sum();
        let fit = if triplet == 0 {
            0
        } else {
            (margin / triplet) as usize
        };
        let os_devices: BTreeMap<u32, Device> = local_positions
            .iter()
            .enumerate()
            .map(|(i, &p)| (p, if i < fit { Device::Gpu } else { Device::Cpu }))
            .collect();
        let on_gpu = os_devices.values().filter(|&&d| d == Device::Gpu).count() as u32;
        PlacementPlan {
            gpu_margin_bytes: margin,
            os_chunks_on_gpu: 3 * on_gpu,
            embedding_device,
            os_devices,
        }
    }
}

/// Embedding on the CPU when its fp16 table outweighs the activation round
/// trip it would otherwise avoid.
pub fn embedding_device(schema: &ModelSchema) -> Device {
    if schema.embedding_param_count * FP16_BYTES > 2 * schema.bsh_bytes() {
        Device::Cpu
    } else {
        Device::Gpu
    }
}

/// Margin = GPU capacity − peak non-model − FWD/BWD working set − fixed GPU
/// reservations such as the embedding.
pub fn gpu_margin(
    gpu_capacity: u64,
    peak_non_model: u64,
    working_set: u64,
    fixed_gpu_bytes: u64,
) -> u64 {
    gpu_capacity
        .saturating_sub(peak_non_model)
        .saturating_sub(working_set)
        .saturating_sub(fixed_gpu_bytes)
}

pub fn compute_placement_plan(
    profile: &WarmupProfile,
    engine: &Engine,
    embedding_device: Device,
) -> PlacementPlan {
    let gpu_cap = engine.mm.pool(Device::Gpu).capacity_bytes;
    let fixed = engine.setup.embedding.map_or(0, |e| e.reservation().0);
    let margin = gpu_margin(
        gpu_cap,
        profile.peak_non_model,
        profile.working_set_bytes,
        fixed,
    );
    PlacementPlan::with_margin(
        margin,
        &engine.local_positions(),
        &engine.store,
        embedding_device,
    )
}

/// Working set predicted from the layout alone: the largest set of fp16
/// chunks one FWD/BWD event computes with, plus its gradient buffer.
pub fn analytic_working_set(store: &ChunkStore, timeline: &[OperatorEvent]) -> u64 {
    let fp16 = store.list(ListKind::ParamFp16);
    timeline
        .iter()
        .filter(|e| e.phase != Phase::Adam)
        .map(|e| {
            let mut positions: Vec<u32> = e
                .tensor_refs
                .iter()
                .map(|&t| store.position_of(t))
                .collect();
            positions.sort_unstable();
            positions.dedup();
            let chunks: u64 = positions
                .iter()
                .map(|&p| store.get(ChunkKey::new(ListKind::ParamFp16, p)).bytes())
                .sum();
            let grad: u64 = if e.phase == Phase::Bwd {
                e.tensor_refs
                    .iter()
                    .map(|&t| {
                        let (pos, _) = fp16.tensor_index[&t];
                        fp16.chunks[pos as usize]
                            .tensors
                            .iter()
                            .find(|m| m.tensor_id == t)
                            .map_or(0, |m| m.numel)
                    })
                    .sum::<u64>()
                    * FP16_BYTES
            } else {
                0
            };
            chunks + grad
        })
        .max()
        .unwrap_or(0)
}
