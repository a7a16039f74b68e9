mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chunkstar::chunk::{
    build_model_chunk_lists, chunk_movability, map_tensors_to_chunks, ChunkKey, ChunkStore,
    ListKind, Movability, TensorState,
};
use chunkstar::dp::{closed_form_volume, partition_chunks, CollectiveKind, Scheme};
use chunkstar::engine::{Engine, EngineSetup, IterationReport};
use chunkstar::fsm::Trigger;
use chunkstar::memory::{Device, LatestNextUse, TransferReason};
use chunkstar::profiler::{embedding_device, PlacementPlan};
use chunkstar::schema::{
    build_gpt_schema, standard_ladder, ActivationModel, ModelSchema, Phase, FP16_BYTES,
};

const ROOMY: u64 = 1 << 40;

fn small_schema(layers: u64) -> ModelSchema {
    build_gpt_schema(layers, 16, 2, 8, 32, 2).unwrap()
}

fn engine_with(
    schema: &ModelSchema,
    capacity: u64,
    gpu: u64,
    cpu: u64,
    p: u32,
    ckpt: bool,
) -> Engine {
    engine_on_rank(schema, capacity, gpu, cpu, p, 0, ckpt)
}

fn engine_on_rank(
    schema: &ModelSchema,
    capacity: u64,
    gpu: u64,
    cpu: u64,
    p: u32,
    rank: u32,
    ckpt: bool,
) -> Engine {
    let mut setup = EngineSetup::new(gpu, cpu);
    setup.nproc = p;
    setup.rank = rank;
    setup.checkpoint = ckpt;
    setup.activation = ActivationModel {
        context_bytes: 0,
        fragmentation: 1.0,
    };
    setup.record_transitions = true;
    Engine::new(schema, capacity, setup, Arc::new(LatestNextUse)).unwrap()
}

fn fp16_states(engine: &Engine) -> Vec<TensorState> {
    engine
        .store
        .list(ListKind::ParamFp16)
        .chunks
        .iter()
        .flat_map(|c| c.tensors.iter().map(|t| t.state))
        .collect()
}

fn full_plan(engine: &Engine) -> PlacementPlan {
    PlacementPlan::with_margin(ROOMY, &engine.local_positions(), &engine.store, Device::Cpu)
}

#[test]
fn every_fp16_tensor_is_reset_after_the_last_forward() {
    let schema = small_schema(3);
    let mut engine = engine_with(&schema, schema.layer_param_count(), ROOMY, ROOMY, 1, false);
    let report = engine.run_iteration().unwrap();
    let tensors = fp16_states(&engine).len();
    let resets = report
        .transitions
        .iter()
        .filter(|(_, t, _)| *t == Trigger::PostFwdReset)
        .count();
    assert_eq!(resets, tensors);
    assert!(fp16_states(&engine).iter().all(|&s| s == TensorState::Hold));
}

#[test]
fn empty_timeline_moves_nothing() {
    let store = ChunkStore::empty(1024);
    let mut setup = EngineSetup::new(ROOMY, ROOMY);
    setup.activation = ActivationModel {
        context_bytes: 0,
        fragmentation: 1.0,
    };
    let mut engine = Engine::from_parts(store, Vec::new(), setup, Arc::new(LatestNextUse)).unwrap();
    let r = engine.run_iteration().unwrap();
    assert!(r.feasible);
    assert_eq!(
        (
            r.cpu_to_gpu_bytes,
            r.gpu_to_cpu_bytes,
            r.intra_gpu_collective_bytes
        ),
        (0, 0, 0)
    );
    assert_eq!(r.moments.len(), 1);
}

#[test]
fn everything_on_gpu_only_moves_the_initial_placement() {
    let schema = small_schema(1);
    let cap = schema.layer_param_count();
    let mut engine = engine_with(&schema, cap, ROOMY, ROOMY, 1, true);
    let plan = full_plan(&engine);
    engine.apply_plan(plan);
    let first = engine.run_iteration().unwrap();
    let positions = engine.store.positions() as u64;
    // fp16 (2 bytes) plus three fp32 optimizer lists (12 bytes) per element
    assert_eq!(first.cpu_to_gpu_bytes, positions * cap * (2 + 12));
    assert_eq!(first.gpu_to_cpu_bytes, 0);
    assert_eq!(first.adam_cross_device_bytes, 0);
    let second = engine.run_iteration().unwrap();
    assert_eq!(second.cpu_to_gpu_bytes + second.gpu_to_cpu_bytes, 0);
}

fn event_grad_bytes(engine: &Engine, i: usize) -> u64 {
    let ev = &engine.timeline[i];
    if ev.phase != Phase::Bwd {
        return 0;
    }
    let fp16 = engine.store.list(ListKind::ParamFp16);
    ev.tensor_refs
        .iter()
        .map(|t| {
            let (pos, _) = fp16.tensor_index[t];
            fp16.chunks[pos as usize]
                .tensors
                .iter()
                .find(|m| m.tensor_id == *t)
                .unwrap()
                .numel
                * FP16_BYTES
        })
        .sum()
}

#[test]
fn gradient_buffer_lives_only_during_its_event() {
    let schema = small_schema(2);
    let mut engine = engine_with(&schema, schema.layer_param_count(), ROOMY, ROOMY, 1, true);
    let r = engine.run_iteration().unwrap();
    let by_moment: BTreeMap<u32, u64> = r
        .moments
        .iter()
        .map(|m| (m.moment, m.gpu_reserved_bytes))
        .collect();
    let mut largest = 0;
    let mut total = 0;
    for i in 0..engine.timeline.len() {
        let g = event_grad_bytes(&engine, i);
        if engine.timeline[i].phase == Phase::Adam {
            continue;
        }
        assert_eq!(by_moment[&(2 * i as u32 + 1)], g, "start of event {i}");
        assert_eq!(by_moment[&(2 * i as u32 + 2)], 0, "finish of event {i}");
        largest = largest.max(g);
        total += g;
    }
    let peak = r
        .moments
        .iter()
        .filter(|m| !m.event.starts_with("ADAM"))
        .map(|m| m.gpu_reserved_bytes)
        .max()
        .unwrap();
    assert_eq!(peak, largest);
    assert!(total > largest);
}

#[test]
fn written_gradients_leave_the_chunk_movable() {
    let schema = small_schema(1);
    let mut engine = engine_with(&schema, schema.layer_param_count(), ROOMY, ROOMY, 1, false);
    let ev = engine
        .timeline
        .iter()
        .find(|e| e.phase == Phase::Bwd)
        .unwrap()
        .clone();
    let fp16 = engine.store.list(ListKind::ParamFp16).clone();
    for t in &ev.tensor_refs {
        let (pos, _) = fp16.tensor_index[t];
        let idx = fp16.chunks[pos as usize]
            .tensors
            .iter()
            .position(|m| m.tensor_id == *t)
            .unwrap();
        engine
            .inject(
                ChunkKey::new(ListKind::ParamFp16, pos),
                idx,
                Trigger::AccessForCompute,
            )
            .unwrap();
    }
    let key = ChunkKey::new(ListKind::ParamFp16, fp16.tensor_index[&ev.tensor_refs[0]].0);
    assert!(matches!(
        chunk_movability(engine.store.get(key)),
        Movability::Pinned(_)
    ));
    engine.write_gradient(&ev, 0).unwrap();
    assert_eq!(chunk_movability(engine.store.get(key)), Movability::Movable);
    assert!(engine
        .store
        .get(key)
        .tensors
        .iter()
        .any(|t| t.state == TensorState::HoldAfterBwd));
    assert!(engine.store.get(key).dirty);
}

fn adam_cross(
    schema: &ModelSchema,
    cap: u64,
    margin_positions: Option<u64>,
) -> (IterationReport, u64) {
    let mut engine = engine_with(schema, cap, ROOMY, ROOMY, 1, true);
    let triplet = 12 * cap;
    let plan = PlacementPlan::with_margin(
        margin_positions.map_or(0, |n| n * triplet),
        &engine.local_positions(),
        &engine.store,
        Device::Cpu,
    );
    engine.apply_plan(plan);
    engine.run_iteration().unwrap();
    (
        engine.run_iteration().unwrap(),
        engine.store.positions() as u64,
    )
}

#[test]
fn adam_cross_device_traffic_follows_the_plan() {
    let schema = small_schema(4);
    let cap = schema.layer_param_count();
    let (all_cpu, positions) = adam_cross(&schema, cap, None);
    assert_eq!(positions, 4);
    // gradient down, updated parameters back up: 2 bytes each way
    assert_eq!(all_cpu.adam_cross_device_bytes, 4 * positions * cap);
    let (half, _) = adam_cross(&schema, cap, Some(positions / 2));
    assert_eq!(
        half.adam_cross_device_bytes,
        all_cpu.adam_cross_device_bytes / 2
    );
    let (none, _) = adam_cross(&schema, cap, Some(positions));
    assert_eq!(none.adam_cross_device_bytes, 0);
}

#[test]
fn optimizer_chunk_count_at_4b_with_128mi_chunks() {
    let rung = standard_ladder()
        .into_iter()
        .find(|r| r.label == "4B")
        .unwrap();
    let schema = build_gpt_schema(rung.layers, rung.hidden_dim, 16, 1024, 50304, 1).unwrap();
    let store = build_model_chunk_lists(&schema, 128 << 20).unwrap();
    let per_list = store.positions();
    let lower = schema.chunked_param_count().div_ceil(128 << 20) as u32;
    assert!(
        per_list >= lower && per_list <= lower + 2,
        "{per_list} chunks per list"
    );
    let os: usize = ListKind::OPTIMIZER
        .iter()
        .map(|&k| store.list(k).len())
        .sum();
    assert_eq!(os, 3 * per_list as usize);
    assert_eq!(store.lists().len(), 4);
}

#[test]
fn large_vocabulary_embedding_goes_to_the_cpu() {
    let big = build_gpt_schema(1, 4096, 16, 1024, 50_000, 16).unwrap();
    assert_eq!(embedding_device(&big), Device::Cpu);
    let tiny_vocab = build_gpt_schema(1, 4096, 16, 1024, 1000, 16).unwrap();
    assert_eq!(embedding_device(&tiny_vocab), Device::Gpu);
}

#[test]
fn four_chunks_over_two_processes() {
    let list = map_tensors_to_chunks(&[10, 10, 10, 10], 10).unwrap();
    let mut store = ChunkStore::from_param_list(list);
    let part = partition_chunks(&mut store, 2);
    for kind in ListKind::ALL {
        let owners: Vec<u32> = store.list(kind).chunks.iter().map(|c| c.owner).collect();
        assert_eq!(owners, vec![0, 1, 0, 1], "{kind:?}");
    }
    let groups: Vec<Vec<u32>> = part
        .groups
        .iter()
        .map(|g| g.members.iter().map(|k| k.pos).collect())
        .collect();
    assert_eq!(groups, vec![vec![0, 1], vec![2, 3]]);
    assert_eq!(part.local_positions(0), vec![0, 2]);
    assert_eq!(part.local_positions(1), vec![1, 3]);
}

#[test]
fn single_process_never_communicates() {
    let schema = small_schema(3);
    let mut engine = engine_with(&schema, schema.layer_param_count(), ROOMY, ROOMY, 1, false);
    let r = engine.run_iteration().unwrap();
    assert!(r.collectives.is_empty());
    assert_eq!(r.intra_gpu_collective_bytes, 0);
    assert_eq!(
        closed_form_volume(1, 1_000_000_000, Scheme::ChunkCollective),
        0.into()
    );
}

#[test]
fn two_process_volume_matches_closed_form() {
    let schema = small_schema(4);
    let cap = schema.layer_param_count();
    let mut engine = engine_with(&schema, cap, ROOMY, ROOMY, 2, false);
    engine.run_iteration().unwrap();
    let r = engine.run_iteration().unwrap();
    let m = engine.store.positions() as u64 * cap;
    assert_eq!(
        closed_form_volume(2, m, Scheme::ChunkCollective),
        (r.intra_gpu_collective_bytes as u128).into()
    );
    let fwd = r.collective_bytes(CollectiveKind::AllgatherFwd);
    assert_eq!(fwd, r.collective_bytes(CollectiveKind::AllgatherBwd));
    assert_eq!(fwd, r.collective_bytes(CollectiveKind::ReduceScatter));
    let gathers_per_group = r
        .collectives
        .iter()
        .filter(|c| c.kind == CollectiveKind::AllgatherFwd)
        .count();
    assert_eq!(gathers_per_group as u32, engine.store.positions() / 2);
}

// Half-layer chunks make a backward event straddle two groups; on rank 1 the
// pressure from the next group's gather pushes the local member out before
// its group reduces.
#[test]
fn reduce_scatter_brings_evicted_members_back() {
    let schema = build_gpt_schema(6, 64, 1, 4, 32, 1).unwrap();
    let cap = schema.layer_param_count() / 2;
    let fp16 = 2 * cap;
    let mut engine = engine_on_rank(&schema, cap, 5 * fp16, ROOMY, 2, 1, false);
    let r = engine.run_iteration().unwrap();
    assert!(r.feasible, "{:?}", r.failure_reason);
    let rs_moments: Vec<u32> = r
        .collectives
        .iter()
        .filter(|c| c.kind == CollectiveKind::ReduceScatter)
        .map(|c| c.moment)
        .collect();
    let fetched: Vec<_> = r
        .transfers
        .iter()
        .filter(|t| {
            t.reason == TransferReason::Collective
                && t.src == Device::Cpu
                && rs_moments.contains(&t.moment)
        })
        .collect();
    assert!(!fetched.is_empty());
    for t in fetched {
        assert_eq!(t.bytes, fp16);
        assert_eq!(engine.partition.owner[&t.chunk], 1);
        let evicted_before = r.transfers.iter().any(|e| {
            e.chunk == t.chunk
                && e.reason == TransferReason::Evict
                && e.src == Device::Gpu
                && e.moment <= t.moment
        });
        assert!(
            evicted_before,
            "{} fetched for a reduce-scatter without an eviction",
            t.chunk
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_are_deterministic_and_balanced(seed in any::<u64>()) {
        let a = common::random_schedule(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = common::random_schedule(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(&a.reports, &b.reports);
        for r in &a.reports {
            prop_assert_eq!(
                r.transfers.iter().map(|t| t.bytes).sum::<u64>(),
                r.cpu_to_gpu_bytes + r.gpu_to_cpu_bytes
            );
            prop_assert!(r.moments.iter().all(|m| m.gpu_used_bytes <= r.peak_gpu_bytes));
        }
        if let Some(engine) = a.engine {
            engine.mm.audit(&engine.store).unwrap();
            for device in [Device::Gpu, Device::Cpu] {
                let pool = engine.mm.pool(device);
                prop_assert!(pool.peak_used <= pool.capacity_bytes);
            }
        }
    }
}
