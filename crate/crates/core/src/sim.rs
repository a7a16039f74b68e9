//! Drives the chunk strategy end to end: warm-up, placement plan, measured
//! iterations. Rank 0 stands in for every process; all ranks run the same
//! timeline in lockstep and rank 0 always holds at least as many real
//! chunks as any other.

use std::sync::Arc;

use serde::Serialize;

use crate::chunk::{ChunkStore, LayoutRow, ListKind};
use crate::engine::{EmbeddingSpec, Engine, EngineSetup, IterationReport};
use crate::error::{Error, Result};
use crate::memory::{Device, EvictionPolicy};
use crate::profiler::{
    compute_placement_plan, embedding_device, warmup_iteration, PlacementPlan, WarmupProfile,
};
use crate::schema::{ActivationModel, ModelSchema};

#[derive(Debug, Clone)]
pub struct ChunkRunConfig {
    pub schema: ModelSchema,
    pub capacity_elems: u64,
    pub gpu_bytes: u64,
    /// Host memory shared by all processes.
    pub cpu_total_bytes: u64,
    pub nproc: u32,
    pub checkpoint: bool,
    pub activation: ActivationModel,
    pub limit_fraction: f64,
    pub policy: Arc<dyn EvictionPolicy>,
    /// Warm-up included.
    pub iterations: u32,
    pub validate: bool,
    pub trace: bool,
    /// Replaces the profiled margin, e.g. 0 to keep all optimizer state on
    /// the CPU.
    pub margin_override: Option<u64>,
    pub include_embedding: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChunkRunResult {
    pub feasible: bool,
    pub failure_reason: Option<String>,
    pub failure_device: Option<Device>,
    pub plan: Option<PlacementPlan>,
    #[serde(skip)]
    pub warmup: Option<WarmupProfile>,
    /// Iterations after warm-up.
    #[serde(skip)]
    pub measured: Vec<IterationReport>,
    pub chunks_per_list: u32,
    /// Chunk-managed elements per list, padding included.
    pub chunked_elems: u64,
    #[serde(skip)]
    pub layout: Vec<LayoutRow>,
}

impl ChunkRunResult {
    /// Warm-up followed by the measured iterations.
    pub fn reports(&self) -> impl Iterator<Item = &IterationReport> {
        self.warmup
            .iter()
            .map(|w| &w.report)
            .chain(self.measured.iter())
    }

    pub fn last(&self) -> Option<&IterationReport> {
        self.reports().last()
    }
}

pub fn embedding_spec(schema: &ModelSchema) -> EmbeddingSpec {
    EmbeddingSpec {
        device: embedding_device(schema),
        param_count: schema.embedding_param_count,
        activation_bytes: schema.bsh_bytes(),
    }
}

impl ChunkRunConfig {
    pub fn engine_setup(&self) -> EngineSetup {
        EngineSetup {
            gpu_bytes: self.gpu_bytes,
            cpu_bytes: self.cpu_total_bytes / self.nproc.max(1) as u64,
            nproc: self.nproc.max(1),
            rank: 0,
            checkpoint: self.checkpoint,
            activation: self.activation,
            embedding: self.include_embedding.then(|| embedding_spec(&self.schema)),
            validate: self.validate,
            trace: self.trace,
            record_transitions: false,
        }
    }

    pub fn build_engine(&self) -> Result<Engine> {
        Engine::new(
            &self.schema,
            self.capacity_elems,
            self.engine_setup(),
            self.policy.clone(),
        )
    }
}

pub fn run_chunk_strategy(cfg: &ChunkRunConfig) -> Result<ChunkRunResult> {
    let mut result = ChunkRunResult {
        feasible: false,
        failure_reason: None,
        failure_device: None,
        plan: None,
        warmup: None,
        measured: Vec::new(),
        chunks_per_list: 0,
        chunked_elems: 0,
        layout: Vec::new(),
    };
    let mut engine = match cfg.build_engine() {
        Ok(e) => e,
        Err(Error::OutOfMemory(info)) => {
            result.failure_reason = Some(info.to_string());
            result.failure_device = Some(info.device);
            return Ok(result);
        }
        Err(e) => return Err(e),
    };
    result.chunks_per_list = engine.store.positions();
    result.chunked_elems = chunked_elems(&engine.store);
    result.layout = engine.store.layout_rows();

    let profile = warmup_iteration(&mut engine, cfg.limit_fraction)?;
    let warm_ok = profile.feasible();
    result.failure_reason = profile.report.failure_reason.clone();
    result.failure_device = profile.report.failure_device;
    let plan = compute_placement_plan(&profile, &engine, embedding_device(&cfg.schema));
    let plan = match cfg.margin_override {
        Some(margin) => PlacementPlan::with_margin(
            margin,
            &engine.local_positions(),
            &engine.store,
            plan.embedding_device,
        ),
        None => plan,
    };
    engine
        .mm
        .set_moment_lists(Some(profile.moment_lists.clone()));
    result.warmup = Some(profile);
    if !warm_ok {
        return Ok(result);
    }
    engine.apply_plan(plan.clone());
    result.plan = Some(plan);

    for _ in 1..cfg.iterations.max(1) {
        let report = engine.run_iteration()?;
        let ok = report.feasible;
        if !ok {
            result.failure_reason = report.failure_reason.clone();
            result.failure_device = report.failure_device;
        }
        result.measured.push(report);
        if !ok {
            return Ok(result);
        }
    }
    result.feasible = true;
    Ok(result)
}

fn chunked_elems(store: &ChunkStore) -> u64 {
    let fp16 = store.list(ListKind::ParamFp16);
    fp16.chunks.len() as u64 * fp16.capacity_elems
}
