//! Training strategies behind one trait, registered by name so scenarios and
//! the CLI pick them at runtime.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::baselines::{
    simulate_ddp, simulate_l2l, simulate_static_offload, BaselineVerdict, FailureReason, Hardware,
};
use crate::error::{Error, Result};
use crate::memory::{Device, EvictionPolicy};
use crate::schema::{peak_non_model, ActivationModel, ModelSchema};
use crate::sim::{run_chunk_strategy, ChunkRunConfig, ChunkRunResult};

#[derive(Debug, Clone)]
pub struct PolicySettings {
    pub capacity_elems: u64,
    pub eviction: Arc<dyn EvictionPolicy>,
    pub limit_fraction: f64,
    pub checkpoint: bool,
    pub activation: ActivationModel,
    pub iterations: u32,
    pub validate: bool,
    pub trace: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub verdict: BaselineVerdict,
    /// Full simulation results, for strategies that simulate.
    pub chunk_run: Option<ChunkRunResult>,
}

pub trait TrainingStrategy: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn evaluate(
        &self,
        schema: &ModelSchema,
        hw: &Hardware,
        policy: &PolicySettings,
    ) -> Result<Evaluation>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct ChunkStrategy;

impl ChunkStrategy {
    pub fn run_config(
        schema: &ModelSchema,
        hw: &Hardware,
        policy: &PolicySettings,
    ) -> ChunkRunConfig {
        ChunkRunConfig {
            schema: schema.clone(),
            capacity_elems: policy.capacity_elems,
            gpu_bytes: hw.gpu_bytes,
            cpu_total_bytes: hw.cpu_bytes,
            nproc: hw.nproc,
            checkpoint: policy.checkpoint,
            activation: policy.activation,
            limit_fraction: policy.limit_fraction,
            policy: policy.eviction.clone(),
            iterations: policy.iterations,
            validate: policy.validate,
            trace: policy.trace,
            margin_override: None,
            include_embedding: true,
        }
    }
}

impl TrainingStrategy for ChunkStrategy {
    fn name(&self) -> &'static str {
        "chunk"
    }

    fn evaluate(
        &self,
        schema: &ModelSchema,
        hw: &Hardware,
        policy: &PolicySettings,
    ) -> Result<Evaluation> {
        let run = run_chunk_strategy(&Self::run_config(schema, hw, policy))?;
        let last = run.last();
        let verdict = BaselineVerdict {
            strategy: self.name().to_string(),
            feasible: run.feasible,
            failure_reason: match (run.feasible, run.failure_device) {
                (true, _) => FailureReason::None,
                (false, Some(Device::Cpu)) => FailureReason::CpuOom,
                (false, _) => FailureReason::GpuOom,
            },
            per_iteration_cpu_gpu_bytes: last.map_or(0, |r| r.total_cpu_gpu_bytes()),
            peak_gpu_bytes: run.reports().map(|r| r.peak_gpu_bytes).max().unwrap_or(0),
            peak_cpu_bytes: run.reports().map(|r| r.peak_cpu_bytes).max().unwrap_or(0),
        };
        Ok(Evaluation {
            verdict,
            chunk_run: Some(run),
        })
    }
}

type AnalyticFn = fn(&ModelSchema, &Hardware, u64) -> BaselineVerdict;

/// A closed-form baseline evaluated against the peak non-model footprint.
#[derive(Clone, Copy)]
pub struct AnalyticStrategy {
    name: &'static str,
    model: AnalyticFn,
}

impl fmt::Debug for AnalyticStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AnalyticStrategy")
            .field("name", &self.name)
            .finish()
    }
}

impl AnalyticStrategy {
    pub const STATIC: AnalyticStrategy = AnalyticStrategy {
        name: "static",
        model: simulate_static_offload,
    };
    pub const DDP: AnalyticStrategy = AnalyticStrategy {
        name: "ddp",
        model: simulate_ddp,
    };
    pub const L2L: AnalyticStrategy = AnalyticStrategy {
        name: "l2l",
        model: simulate_l2l,
    };
}

impl TrainingStrategy for AnalyticStrategy {
    fn name(&self) -> &'static str {
        self.name
    }

    fn evaluate(
        &self,
        schema: &ModelSchema,
        hw: &Hardware,
        policy: &PolicySettings,
    ) -> Result<Evaluation> {
        let peak = peak_non_model(schema, policy.checkpoint, &policy.activation);
        Ok(Evaluation {
            verdict: (self.model)(schema, hw, peak),
            chunk_run: None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StrategyRegistry {
    entries: BTreeMap<&'static str, Arc<dyn TrainingStrategy>>,
}

impl Default for StrategyRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}

impl StrategyRegistry {
    pub fn empty() -> Self {
        StrategyRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Arc::new(ChunkStrategy));
        r.register(Arc::new(AnalyticStrategy::STATIC));
        r.register(Arc::new(AnalyticStrategy::DDP));
        r.register(Arc::new(AnalyticStrategy::L2L));
        r
    }

    pub fn register(&mut self, strategy: Arc<dyn TrainingStrategy>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn TrainingStrategy>> {
        let norm = name.trim().to_ascii_lowercase();
        self.entries
            .get(norm.as_str())
            .cloned()
            .ok_or_else(|| Error::UnknownName {
                kind: "strategy",
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }
}
