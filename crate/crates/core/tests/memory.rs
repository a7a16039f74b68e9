use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use chunkstar::chunk::{map_tensors_to_chunks, ChunkKey, ChunkStore, ListKind};
use chunkstar::fsm::{TransitionTable, Trigger};
use chunkstar::memory::oracle::{oracle_min_transfers, simulate_policy_fetches};
use chunkstar::memory::policy::{next_use, EvictionContext, MomentLists};
use chunkstar::memory::{
    Device, EvictionPolicy, LatestNextUse, ListOrder, MemoryManager, TransferReason,
};
use chunkstar::Error;

const CAP: u64 = 100;
const FP16: u64 = 2 * CAP;

fn key(pos: u32) -> ChunkKey {
    ChunkKey::new(ListKind::ParamFp16, pos)
}

/// `n` fp16 chunks in HOLD, all placed on the CPU.
fn setup(n: usize, gpu_chunks: u64) -> (ChunkStore, MemoryManager) {
    let mut store = ChunkStore::from_param_list(map_tensors_to_chunks(&vec![CAP; n], CAP).unwrap());
    let table = TransitionTable::standard();
    let mut mm = MemoryManager::new(gpu_chunks * FP16, 1 << 30, Arc::new(LatestNextUse));
    for pos in 0..n as u32 {
        table
            .apply_all(store.get_mut(key(pos)), Trigger::Init)
            .unwrap();
        mm.place_initial(&mut store, key(pos), Device::Cpu).unwrap();
    }
    (store, mm)
}

#[test]
fn fetch_to_current_device_is_free() {
    let (mut store, mut mm) = setup(2, 4);
    assert_eq!(
        mm.fetch_chunk(&mut store, key(0), Device::Cpu, TransferReason::Fetch)
            .unwrap(),
        0
    );
    assert!(mm.ledger().is_empty());
}

#[test]
fn fetch_with_room_is_one_transfer() {
    let (mut store, mut mm) = setup(2, 4);
    assert_eq!(
        mm.fetch_chunk(&mut store, key(1), Device::Gpu, TransferReason::Fetch)
            .unwrap(),
        FP16
    );
    assert_eq!(mm.ledger().len(), 1);
    assert_eq!(mm.eviction_count(), 0);
    assert_eq!(store.get(key(1)).resident, Some(Device::Gpu));
    assert_eq!(
        mm.fetch_chunk(&mut store, key(1), Device::Gpu, TransferReason::Fetch)
            .unwrap(),
        0
    );
    assert_eq!(mm.ledger().len(), 1);
}

#[test]
fn fetch_into_full_gpu_evicts_first() {
    let (mut store, mut mm) = setup(3, 2);
    for pos in 0..2 {
        mm.fetch_chunk(&mut store, key(pos), Device::Gpu, TransferReason::Fetch)
            .unwrap();
    }
    assert_eq!(mm.pool(Device::Gpu).free(), 0);
    mm.fetch_chunk(&mut store, key(2), Device::Gpu, TransferReason::Fetch)
        .unwrap();
    assert!(mm.eviction_count() >= 1);
    assert_eq!(store.get(key(2)).resident, Some(Device::Gpu));
    mm.audit(&store).unwrap();
}

#[test]
fn dirty_eviction_moves_bytes_clean_eviction_does_not() {
    let (mut store, mut mm) = setup(2, 1);
    mm.fetch_chunk(&mut store, key(0), Device::Gpu, TransferReason::Fetch)
        .unwrap();
    mm.fetch_chunk(&mut store, key(1), Device::Gpu, TransferReason::Fetch)
        .unwrap();
    assert!(mm
        .ledger()
        .iter()
        .all(|t| t.reason == TransferReason::Fetch));
    mm.mark_dirty(&mut store, key(1));
    mm.fetch_chunk(&mut store, key(0), Device::Gpu, TransferReason::Fetch)
        .unwrap();
    let evicts: Vec<_> = mm
        .ledger()
        .iter()
        .filter(|t| t.reason == TransferReason::Evict)
        .collect();
    assert_eq!(evicts.len(), 1);
    assert_eq!(
        (evicts[0].chunk, evicts[0].src, evicts[0].bytes),
        (key(1), Device::Gpu, FP16)
    );
}

#[test]
fn evicting_nothing_is_a_no_op() {
    let (mut store, mut mm) = setup(2, 2);
    mm.fetch_chunk(&mut store, key(0), Device::Gpu, TransferReason::Fetch)
        .unwrap();
    assert!(mm
        .evict_for(&mut store, Device::Gpu, 0, "test")
        .unwrap()
        .is_empty());
}

#[test]
fn all_pinned_is_out_of_memory() {
    let (mut store, mut mm) = setup(2, 2);
    for pos in 0..2 {
        mm.fetch_chunk(&mut store, key(pos), Device::Gpu, TransferReason::Fetch)
            .unwrap();
        mm.pin(key(pos));
    }
    let err = mm
        .evict_for(&mut store, Device::Gpu, FP16, "test")
        .unwrap_err();
    assert!(matches!(err, Error::OutOfMemory(ref info) if info.device == Device::Gpu));
    for pos in 0..2 {
        assert_eq!(store.get(key(pos)).resident, Some(Device::Gpu));
    }
}

#[test]
fn latest_next_use_evicts_the_later_chunk() {
    let mut lists = MomentLists::default();
    let t = 10;
    lists.record(Device::Gpu, key(0), t + 1);
    lists.record(Device::Gpu, key(1), t + 9);
    let ctx = EvictionContext {
        device: Device::Gpu,
        moment: t,
        moment_lists: Some(&lists),
    };
    assert_eq!(
        LatestNextUse.pick_victim(&[key(0), key(1)], &ctx),
        Some(key(1))
    );
    // a chunk never used again beats any future use
    assert_eq!(
        LatestNextUse.pick_victim(&[key(0), key(1), key(2)], &ctx),
        Some(key(2))
    );
    assert_eq!(ListOrder.pick_victim(&[key(1), key(0)], &ctx), Some(key(0)));
    assert_eq!(LatestNextUse.pick_victim(&[], &ctx), None);
}

#[test]
fn next_use_is_strictly_after() {
    let mut lists = MomentLists::default();
    for m in [3, 7, 7, 12] {
        lists.record(Device::Gpu, key(0), m);
    }
    assert_eq!(lists.moments(Device::Gpu, key(0)), &[3, 7, 12]);
    assert_eq!(next_use(key(0), Device::Gpu, 0, &lists), Some(3));
    assert_eq!(next_use(key(0), Device::Gpu, 7, &lists), Some(12));
    assert_eq!(next_use(key(0), Device::Gpu, 12, &lists), None);
    assert_eq!(next_use(key(0), Device::Cpu, 0, &lists), None);
    let mut two = MomentLists::default();
    two.record(Device::Gpu, key(1), 3);
    two.record(Device::Gpu, key(1), 17);
    assert_eq!(next_use(key(1), Device::Gpu, 5, &two), Some(17));
    assert_eq!(next_use(key(1), Device::Gpu, 20, &two), None);
}

#[test]
fn oracle_small_cases() {
    assert_eq!(oracle_min_transfers(&[0, 1, 2, 0, 1], 2).unwrap(), 4);
    assert_eq!(
        simulate_policy_fetches(&[0, 1, 2, 0, 1], 2, &LatestNextUse),
        4
    );
    assert_eq!(oracle_min_transfers(&[], 2).unwrap(), 0);
    assert_eq!(oracle_min_transfers(&[0, 1, 2, 0, 1, 2], 3).unwrap(), 3);
    assert_eq!(oracle_min_transfers(&[0, 1, 0, 1], 1).unwrap(), 4);
    assert_eq!(oracle_min_transfers(&[0, 1, 2, 0, 1, 2], 2).unwrap(), 4);
    assert!(matches!(
        oracle_min_transfers(&[0; 13], 1),
        Err(Error::InstanceTooLarge(_))
    ));
    assert!(matches!(
        oracle_min_transfers(&[0, 1, 2, 3, 4, 5, 6], 2),
        Err(Error::InstanceTooLarge(_))
    ));
}

/// Brute force over every victim choice, written without memoization or
/// bitmasks.
fn brute_force(seq: &[u32], cache: &BTreeSet<u32>, cap: usize) -> u32 {
    let Some((&c, rest)) = seq.split_first() else {
        return 0;
    };
    if cache.contains(&c) {
        return brute_force(rest, cache, cap);
    }
    if cache.len() < cap {
        let mut next = cache.clone();
        next.insert(c);
        return 1 + brute_force(rest, &next, cap);
    }
    cache
        .iter()
        .map(|&v| {
            let mut next = cache.clone();
            next.remove(&v);
            next.insert(c);
            1 + brute_force(rest, &next, cap)
        })
        .min()
        .unwrap()
}

#[derive(Debug, Clone)]
enum Op {
    Fetch(u32, bool),
    Evict(bool, u64),
    Pin(u32),
    Unpin(u32),
    Dirty(u32),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u32..6, any::<bool>()).prop_map(|(p, g)| Op::Fetch(p, g)),
        (any::<bool>(), 0u64..3 * FP16).prop_map(|(g, b)| Op::Evict(g, b)),
        (0u32..6).prop_map(Op::Pin),
        (0u32..6).prop_map(Op::Unpin),
        (0u32..6).prop_map(Op::Dirty),
    ]
}

proptest! {
    #[test]
    fn oracle_matches_brute_force(seq in prop::collection::vec(0u32..4, 1..9), cap in 1usize..4) {
        prop_assert_eq!(oracle_min_transfers(&seq, cap).unwrap(), brute_force(&seq, &BTreeSet::new(), cap));
    }

    #[test]
    fn latest_next_use_is_optimal(seq in prop::collection::vec(0u32..6, 1..13), cap in 1usize..5) {
        let best = oracle_min_transfers(&seq, cap).unwrap();
        prop_assert_eq!(simulate_policy_fetches(&seq, cap, &LatestNextUse), best);
        prop_assert!(simulate_policy_fetches(&seq, cap, &ListOrder) >= best);
        let distinct: BTreeSet<u32> = seq.iter().copied().collect();
        prop_assert!(best as usize >= distinct.len());
    }

    #[test]
    fn pools_stay_consistent(ops in prop::collection::vec(op(), 1..60), gpu_chunks in 1u64..5) {
        let (mut store, mut mm) = setup(6, gpu_chunks);
        for op in ops {
            // an explicit fetch may move its own chunk; nothing else pinned may move
            let own = match op {
                Op::Fetch(p, _) => Some(key(p)),
                _ => None,
            };
            let pinned: Vec<(ChunkKey, Option<Device>)> = (0..6)
                .map(key)
                .filter(|&k| mm.is_pinned(k) && Some(k) != own)
                .map(|k| (k, store.get(k).resident))
                .collect();
            let result = match op {
                Op::Fetch(p, gpu) => {
                    let target = if gpu { Device::Gpu } else { Device::Cpu };
                    mm.fetch_chunk(&mut store, key(p), target, TransferReason::Fetch).map(|_| ())
                }
                Op::Evict(gpu, bytes) => {
                    let device = if gpu { Device::Gpu } else { Device::Cpu };
                    mm.evict_for(&mut store, device, bytes, "test").map(|_| ())
                }
                Op::Pin(p) => {
                    if !mm.is_pinned(key(p)) {
                        mm.pin(key(p));
                    }
                    Ok(())
                }
                Op::Unpin(p) => {
                    if mm.is_pinned(key(p)) {
                        mm.unpin(key(p));
                    }
                    Ok(())
                }
                Op::Dirty(p) => {
                    mm.mark_dirty(&mut store, key(p));
                    Ok(())
                }
            };
            prop_assert!(result.is_ok() || result.as_ref().unwrap_err().is_oom());
            mm.audit(&store).unwrap();
            for device in [Device::Gpu, Device::Cpu] {
                let pool = mm.pool(device);
                prop_assert!(pool.used() <= pool.capacity_bytes);
            }
            for (k, was) in pinned {
                if mm.is_pinned(k) {
                    prop_assert_eq!(store.get(k).resident, was, "pinned {} moved", k);
                }
            }
            prop_assert!((0..6).all(|p| store.get(key(p)).resident.is_some()));
        }
    }
}
