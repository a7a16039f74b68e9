//! Summary and ledger types plus their file writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::baselines::BaselineVerdict;
use crate::chunk::LayoutRow;
use crate::config::TimeEstimate;
use crate::dp::CollectiveKind;
use crate::engine::{IterationReport, TraceRecord};
use crate::error::Result;
use crate::memory::Device;
use crate::profiler::PlacementPlan;

pub const SUMMARY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelSummary {
    pub layers: u64,
    pub hidden_dim: u64,
    pub heads: u64,
    pub seq_len: u64,
    pub vocab: u64,
    pub batch: u64,
    pub param_count: u64,
    pub embedding_param_count: u64,
    pub chunked_param_count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HardwareSummary {
    pub gpu_count: u32,
    pub gpu_bytes: u64,
    pub cpu_bytes: u64,
    pub per_process_cpu_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct IterationSummary {
    pub iteration: u32,
    pub feasible: bool,
    pub failure_reason: Option<String>,
    pub cpu_to_gpu_bytes: u64,
    pub gpu_to_cpu_bytes: u64,
    pub embedding_transfer_bytes: u64,
    pub adam_cross_device_bytes: u64,
    pub allgather_fwd_bytes: u64,
    pub allgather_bwd_bytes: u64,
    pub regather_refwd_bytes: u64,
    pub reduce_scatter_bytes: u64,
    pub peak_gpu_bytes: u64,
    pub peak_cpu_bytes: u64,
    pub working_set_bytes: u64,
    pub evictions: u64,
}

impl From<&IterationReport> for IterationSummary {
    fn from(r: &IterationReport) -> Self {
        IterationSummary {
            iteration: r.iteration,
            feasible: r.feasible,
            failure_reason: r.failure_reason.clone(),
            cpu_to_gpu_bytes: r.cpu_to_gpu_bytes,
            gpu_to_cpu_bytes: r.gpu_to_cpu_bytes,
            embedding_transfer_bytes: r.embedding_transfer_bytes,
            adam_cross_device_bytes: r.adam_cross_device_bytes,
            allgather_fwd_bytes: r.collective_bytes(CollectiveKind::AllgatherFwd),
            allgather_bwd_bytes: r.collective_bytes(CollectiveKind::AllgatherBwd),
            regather_refwd_bytes: r.collective_bytes(CollectiveKind::RegatherRefwd),
            reduce_scatter_bytes: r.collective_bytes(CollectiveKind::ReduceScatter),
            peak_gpu_bytes: r.peak_gpu_bytes,
            peak_cpu_bytes: r.peak_cpu_bytes,
            working_set_bytes: r.working_set_bytes,
            evictions: r.evictions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChunkSummary {
    pub chunk_capacity_elems: u64,
    pub chunks_per_list: u32,
    pub chunked_elems: u64,
    pub plan: Option<PlacementPlan>,
    pub iterations: Vec<IterationSummary>,
    /// `6(p-1)/p · chunked_elems` as an exact fraction.
    pub collective_closed_form_bytes: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategySummary {
    pub name: String,
    pub verdict: BaselineVerdict,
    pub time_estimate: TimeEstimate,
    pub chunk: Option<ChunkSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub format_version: u32,
    pub scenario: Option<String>,
    pub seed: u64,
    pub iterations: u32,
    pub model: ModelSummary,
    pub hardware: HardwareSummary,
    pub strategies: Vec<StrategySummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    pub strategy: String,
    pub gpu_count: u32,
    pub max_scale: Option<String>,
    pub max_batch: Option<u64>,
    pub rung_index: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
struct MomentRow<'a> {
    iteration: u32,
    moment: u32,
    event: &'a str,
    device: Device,
    r: u64,
    c: u64,
    non_model: u64,
}

#[derive(Debug, Clone, Serialize)]
struct TransferRow {
    iteration: u32,
    moment: u32,
    chunk_id: String,
    src: Device,
    dst: Device,
    bytes: u64,
    reason: crate::memory::TransferReason,
}

#[derive(Debug, Clone, Serialize)]
struct CollectiveRow {
    iteration: u32,
    group_id: u32,
    kind: &'static str,
    bytes: u64,
    includes_padding: bool,
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let mut text = serde_json::to_string_pretty(summary)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// R, C and non-model bytes per device and moment.
pub fn write_moments<'a>(
    path: &Path,
    reports: impl Iterator<Item = &'a IterationReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut wrote = false;
    for r in reports {
        for m in &r.moments {
            let gpu_c = m.gpu_chunk_bytes + m.gpu_reserved_bytes;
            let cpu_c = m.cpu_chunk_bytes + m.cpu_reserved_bytes;
            for (device, used, c) in [
                (Device::Gpu, m.gpu_used_bytes, gpu_c),
                (Device::Cpu, m.cpu_used_bytes, cpu_c),
            ] {
                w.serialize(MomentRow {
                    iteration: r.iteration,
                    moment: m.moment,
                    event: &m.event,
                    device,
                    r: used,
                    c,
                    non_model: used - c,
                })?;
                wrote = true;
            }
        }
    }
    if !wrote {
        w.write_record([
            "iteration",
            "moment",
            "event",
            "device",
            "r",
            "c",
            "non_model",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_transfers<'a>(
    path: &Path,
    reports: impl Iterator<Item = &'a IterationReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut wrote = false;
    for r in reports {
        for t in &r.transfers {
            w.serialize(TransferRow {
                iteration: r.iteration,
                moment: t.moment,
                chunk_id: t.chunk.to_string(),
                src: t.src,
                dst: t.dst,
                bytes: t.bytes,
                reason: t.reason,
            })?;
            wrote = true;
        }
    }
    if !wrote {
        w.write_record([
            "iteration",
            "moment",
            "chunk_id",
            "src",
            "dst",
            "bytes",
            "reason",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_collectives<'a>(
    path: &Path,
    reports: impl Iterator<Item = &'a IterationReport>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut wrote = false;
    for r in reports {
        for c in &r.collectives {
            w.serialize(CollectiveRow {
                iteration: c.iteration,
                group_id: c.group_id,
                kind: c.kind.name(),
                bytes: c.bytes,
                includes_padding: c.includes_padding,
            })?;
            wrote = true;
        }
    }
    if !wrote {
        w.write_record(["iteration", "group_id", "kind", "bytes", "includes_padding"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_layout(path: &Path, rows: &[LayoutRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record(["tensor_id", "list_kind", "chunk_id", "offset", "numel"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "strategy",
            "gpu_count",
            "max_scale",
            "max_batch",
            "rung_index",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<'a>(path: &Path, records: impl Iterator<Item = &'a TraceRecord>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
