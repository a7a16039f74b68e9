#![allow(dead_code)]

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use chunkstar::chunk::TensorState;
use chunkstar::config::ScenarioConfig;
use chunkstar::engine::{Engine, EngineSetup, IterationReport};
use chunkstar::fsm::Trigger;
use chunkstar::memory::{EvictionPolicy, LatestNextUse, ListOrder};
use chunkstar::profiler::{compute_placement_plan, warmup_iteration, PlacementPlan};
use chunkstar::schema::{build_gpt_schema, peak_non_model, ActivationModel, ModelSchema};
use chunkstar::Error;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn load_config(name: &str) -> ScenarioConfig {
    ScenarioConfig::load(&configs_dir().join(name)).expect("bundled config parses")
}

/// Sequential packing written from the definition: place each tensor at the
/// current fill of the open chunk, opening a new chunk when it does not fit.
/// Returns (chunk, offset) per tensor.
pub fn reference_pack(sizes: &[u64], capacity: u64) -> Vec<(u32, u64)> {
    let mut out = Vec::new();
    let mut chunk: i64 = -1;
    let mut used = capacity;
    for &s in sizes {
        if used + s > capacity {
            chunk += 1;
            used = 0;
        }
        out.push((chunk as u32, used));
        used += s;
    }
    out
}

/// The legal tensor transitions, listed independently of the engine's table.
pub fn legal_transitions() -> HashSet<(TensorState, Trigger, TensorState)> {
    use TensorState as S;
    use Trigger as T;
    [
        (S::Free, T::Init, S::Hold),
        (S::Free, T::AllgatherArrival, S::Hold),
        (S::Hold, T::AccessForCompute, S::Compute),
        (S::Hold, T::AdamAccess, S::Compute),
        (S::Compute, T::FinishFwd, S::HoldAfterFwd),
        (S::Compute, T::FinishBwdGradOverwrite, S::HoldAfterBwd),
        (S::Compute, T::AdamFinish, S::Hold),
        (S::HoldAfterFwd, T::PostFwdReset, S::Hold),
        (S::HoldAfterFwd, T::AccessAfterReforward, S::Compute),
        (S::HoldAfterFwd, T::Release, S::Free),
        (S::HoldAfterBwd, T::Release, S::Free),
    ]
    .into_iter()
    .collect()
}

pub const ALL_TRIGGERS: [Trigger; 10] = [
    Trigger::Init,
    Trigger::AccessForCompute,
    Trigger::AccessAfterReforward,
    Trigger::FinishFwd,
    Trigger::PostFwdReset,
    Trigger::FinishBwdGradOverwrite,
    Trigger::Release,
    Trigger::AdamAccess,
    Trigger::AdamFinish,
    Trigger::AllgatherArrival,
];

pub fn tiny_schema(rng: &mut ChaCha8Rng) -> ModelSchema {
    let hidden = *[8u64, 16, 32].choose(rng).unwrap();
    let heads = *[1u64, 2, 4].choose(rng).unwrap();
    let seq = *[4u64, 8, 16].choose(rng).unwrap();
    build_gpt_schema(
        rng.gen_range(1..=3),
        hidden,
        heads,
        seq,
        32,
        rng.gen_range(1..=4),
    )
    .unwrap()
}

pub struct RandomSchedule {
    pub engine: Option<Engine>,
    pub reports: Vec<IterationReport>,
}

/// Builds an engine with random shape, capacity, process count, memory
/// sizes and policy, then runs warm-up plus one or two planned iterations.
/// Out-of-memory ends the schedule early; every other error is returned.
pub fn random_schedule(rng: &mut ChaCha8Rng) -> Result<RandomSchedule, Error> {
    let schema = tiny_schema(rng);
    let h = schema.hidden_dim;
    let capacity = rng.gen_range(4 * h * h..=2 * schema.layer_param_count());
    let checkpoint = rng.gen_bool(0.5);
    let activation = ActivationModel {
        context_bytes: rng.gen_range(0..=4096),
        fragmentation: 1.0,
    };
    let peak = peak_non_model(&schema, checkpoint, &activation);
    let fp32_chunk = 4 * capacity;
    let mut setup = EngineSetup::new(
        peak + rng.gen_range(1..=14) * fp32_chunk,
        rng.gen_range(2..=40) * fp32_chunk,
    );
    setup.nproc = *[1u32, 2, 4].choose(rng).unwrap();
    setup.checkpoint = checkpoint;
    setup.activation = activation;
    setup.record_transitions = true;
    let policy: Arc<dyn EvictionPolicy> = if rng.gen_bool(0.5) {
        Arc::new(LatestNextUse)
    } else {
        Arc::new(ListOrder)
    };

    let mut engine = match Engine::new(&schema, capacity, setup, policy) {
        Ok(e) => e,
        Err(Error::OutOfMemory(_)) => {
            return Ok(RandomSchedule {
                engine: None,
                reports: Vec::new(),
            })
        }
        Err(e) => return Err(e),
    };
    let mut reports = Vec::new();
    let profile = warmup_iteration(&mut engine, rng.gen_range(0.5..=1.0))?;
    let ok = profile.feasible();
    let plan = if rng.gen_bool(0.5) {
        compute_placement_plan(&profile, &engine, chunkstar::memory::Device::Cpu)
    } else {
        let margin = rng.gen_range(0..=6) * 3 * fp32_chunk;
        PlacementPlan::with_margin(
            margin,
            &engine.local_positions(),
            &engine.store,
            chunkstar::memory::Device::Cpu,
        )
    };
    engine
        .mm
        .set_moment_lists(Some(profile.moment_lists.clone()));
    reports.push(profile.report);
    if ok {
        engine.apply_plan(plan);
        for _ in 0..rng.gen_range(1..=2) {
            let r = engine.run_iteration()?;
            let stop = !r.feasible;
            reports.push(r);
            if stop {
                break;
            }
        }
    }
    Ok(RandomSchedule {
        engine: Some(engine),
        reports,
    })
}

/// Index of a rung label in a ladder.
pub fn rung_index(ladder: &[chunkstar::schema::ScaleRung], label: &str) -> usize {
    ladder
        .iter()
        .position(|r| r.label == label)
        .unwrap_or_else(|| panic!("no rung {label}"))
}
