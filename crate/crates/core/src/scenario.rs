//! Scenario orchestration: run every selected strategy on one config, sweep
//! the model ladder, or explain the layout and placement plan.

use std::path::Path;

use serde::Serialize;

use crate::baselines::max_feasible_scale;
use crate::chunk::{build_model_chunk_lists, LayoutRow, ListKind};
use crate::config::{ScenarioConfig, TimeEstimate};
use crate::dp::{closed_form_volume, partition_chunks, Scheme};
use crate::error::{Error, Result};
use crate::memory::Device;
use crate::profiler::{analytic_working_set, embedding_device, gpu_margin, PlacementPlan};
use crate::report::{
    self, ChunkSummary, HardwareSummary, IterationSummary, ModelSummary, StrategySummary, Summary,
    SweepRow, SUMMARY_FORMAT_VERSION,
};
use crate::schema::{build_event_timeline, peak_non_model};
use crate::sim::embedding_spec;
use crate::strategy::{Evaluation, StrategyRegistry};

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub strategies: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub iterations: Option<u32>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ScenarioConfig) -> Result<()> {
        if let Some(s) = &self.strategies {
            cfg.strategies = s.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        cfg.validate()?;
        let registry = StrategyRegistry::with_builtins();
        for name in &cfg.strategies {
            registry.get(name)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct StrategyOutcome {
    pub name: String,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct ScenarioOutput {
    pub summary: Summary,
    pub outcomes: Vec<StrategyOutcome>,
    pub layout: Vec<LayoutRow>,
    pub trace: bool,
}

/// Chunk layout as every process sees it: padded to the process count.
pub fn scenario_layout(cfg: &ScenarioConfig) -> Result<Vec<LayoutRow>> {
    let mut store = build_model_chunk_lists(&cfg.schema()?, cfg.policy.chunk_capacity.0)?;
    partition_chunks(&mut store, cfg.hardware.gpu_count);
    Ok(store.layout_rows())
}

pub fn run_scenario(cfg: &ScenarioConfig, trace: bool) -> Result<ScenarioOutput> {
    let schema = cfg.schema()?;
    let hw = cfg.hardware();
    let settings = cfg.policy_settings(trace)?;
    let registry = StrategyRegistry::with_builtins();

    let mut outcomes = Vec::new();
    let mut strategies = Vec::new();
    for name in &cfg.strategies {
        let strategy = registry.get(name)?;
        let evaluation = strategy.evaluate(&schema, &hw, &settings)?;
        let chunk = evaluation.chunk_run.as_ref().map(|run| ChunkSummary {
            chunk_capacity_elems: settings.capacity_elems,
            chunks_per_list: run.chunks_per_list,
            chunked_elems: run.chunked_elems,
            plan: run.plan.clone(),
            iterations: run.reports().map(IterationSummary::from).collect(),
            collective_closed_form_bytes: closed_form_volume(
                hw.nproc,
                run.chunked_elems,
                Scheme::ChunkCollective,
            )
            .to_string(),
        });
        let collective = evaluation
            .chunk_run
            .as_ref()
            .and_then(|r| r.last())
            .map_or(0, |r| r.collectives.iter().map(|c| c.bytes).sum());
        strategies.push(StrategySummary {
            name: strategy.name().to_string(),
            verdict: evaluation.verdict.clone(),
            time_estimate: TimeEstimate::new(
                evaluation.verdict.per_iteration_cpu_gpu_bytes,
                collective,
                &cfg.hardware,
            ),
            chunk,
        });
        outcomes.push(StrategyOutcome {
            name: strategy.name().to_string(),
            evaluation,
        });
    }

    let m = &cfg.model;
    let summary = Summary {
        format_version: SUMMARY_FORMAT_VERSION,
        scenario: cfg.name.clone(),
        seed: cfg.seed,
        iterations: cfg.iterations,
        model: ModelSummary {
            layers: m.layers,
            hidden_dim: m.hidden_dim,
            heads: m.heads,
            seq_len: m.seq_len,
            vocab: m.vocab,
            batch: m.batch,
            param_count: schema.param_count,
            embedding_param_count: schema.embedding_param_count,
            chunked_param_count: schema.chunked_param_count(),
        },
        hardware: HardwareSummary {
            gpu_count: hw.nproc,
            gpu_bytes: hw.gpu_bytes,
            cpu_bytes: hw.cpu_bytes,
            per_process_cpu_bytes: hw.per_process_cpu_bytes(),
        },
        strategies,
    };
    Ok(ScenarioOutput {
        summary,
        outcomes,
        layout: scenario_layout(cfg)?,
        trace,
    })
}

/// Writes the report bundle. Strategies that do not simulate get header-only
/// ledgers so every strategy has the same set of files.
pub fn write_bundle(out: &ScenarioOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    report::write_summary(&dir.join("summary.json"), &out.summary)?;
    report::write_layout(&dir.join("layout.csv"), &out.layout)?;
    for o in &out.outcomes {
        let run = o.evaluation.chunk_run.as_ref();
        let reports = || run.into_iter().flat_map(|r| r.reports());
        report::write_moments(&dir.join(format!("moments_{}.csv", o.name)), reports())?;
        report::write_transfers(&dir.join(format!("transfers_{}.csv", o.name)), reports())?;
        report::write_collectives(&dir.join(format!("collectives_{}.csv", o.name)), reports())?;
        if out.trace && run.is_some() {
            report::write_trace(
                &dir.join(format!("trace_{}.jsonl", o.name)),
                reports().flat_map(|r| r.trace.iter()),
            )?;
        }
    }
    Ok(())
}

/// Largest feasible ladder rung and batch for every strategy and GPU count.
/// Points run on parallel threads; rows come back in config order.
pub fn sweep_max_scale(cfg: &ScenarioConfig) -> Result<Vec<SweepRow>> {
    let registry = StrategyRegistry::with_builtins();
    let mut settings = cfg.policy_settings(false)?;
    settings.validate = false;
    let ladder = cfg.ladder();
    let mut points = Vec::new();
    for name in &cfg.strategies {
        let strategy = registry.get(name)?;
        for &p in &cfg.sweep.gpu_counts {
            points.push((strategy.clone(), p));
        }
    }
    let results: Vec<Result<SweepRow>> = std::thread::scope(|scope| {
        let handles: Vec<_> = points
            .iter()
            .map(|(strategy, p)| {
                let (ladder, settings) = (&ladder, &settings);
                scope.spawn(move || {
                    let hw = cfg.hardware_with(*p);
                    let found =
                        max_feasible_scale(ladder, &cfg.sweep.batch_sizes, |rung, batch| {
                            let schema = cfg.rung_schema(rung, batch)?;
                            Ok(strategy.evaluate(&schema, &hw, settings)?.verdict.feasible)
                        })?;
                    Ok(SweepRow {
                        strategy: strategy.name().to_string(),
                        gpu_count: *p,
                        max_scale: found.label,
                        max_batch: found.max_batch,
                        rung_index: found.rung,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Invariant("sweep worker panicked".into())))
            })
            .collect()
    });
    results.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlanExplanation {
    pub chunk_capacity_elems: u64,
    pub chunks_per_list: u32,
    pub chunked_elems: u64,
    pub packing_efficiency: f64,
    pub gpu_count: u32,
    pub peak_non_model_bytes: u64,
    pub working_set_bytes: u64,
    pub embedding_device: Device,
    pub embedding_gpu_bytes: u64,
    pub embedding_cpu_bytes: u64,
    pub gpu_margin_bytes: u64,
    pub plan: PlacementPlan,
}

/// Layout and placement plan predicted from the analytic activation model
/// and working set, without simulating.
pub fn explain_plan(cfg: &ScenarioConfig) -> Result<(PlanExplanation, Vec<LayoutRow>)> {
    let schema = cfg.schema()?;
    let mut store = build_model_chunk_lists(&schema, cfg.policy.chunk_capacity.0)?;
    let real = store.list(ListKind::ParamFp16).chunks.len() as u64;
    let partition = partition_chunks(&mut store, cfg.hardware.gpu_count);
    let fp16 = store.list(ListKind::ParamFp16);
    let chunked_elems = fp16.chunks.len() as u64 * fp16.capacity_elems;
    let timeline = build_event_timeline(&schema, cfg.policy.checkpoint);
    let peak = peak_non_model(&schema, cfg.policy.checkpoint, &cfg.activation());
    let working_set = analytic_working_set(&store, &timeline);
    let emb = embedding_spec(&schema);
    let (emb_gpu, emb_cpu) = emb.reservation();
    let margin = gpu_margin(cfg.hardware.gpu_bytes.0, peak, working_set, emb_gpu);
    let plan = PlacementPlan::with_margin(
        margin,
        &partition.local_positions(0),
        &store,
        embedding_device(&schema),
    );
    let explanation = PlanExplanation {
        chunk_capacity_elems: fp16.capacity_elems,
        chunks_per_list: store.positions(),
        chunked_elems,
        packing_efficiency: schema.chunked_param_count() as f64
            / (real * fp16.capacity_elems) as f64,
        gpu_count: cfg.hardware.gpu_count,
        peak_non_model_bytes: peak,
        working_set_bytes: working_set,
        embedding_device: emb.device,
        embedding_gpu_bytes: emb_gpu,
        embedding_cpu_bytes: emb_cpu,
        gpu_margin_bytes: margin,
        plan,
    };
    Ok((explanation, store.layout_rows()))
}
