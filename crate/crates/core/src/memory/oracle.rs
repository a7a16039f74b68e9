//! Exhaustive optimal-eviction search for small uniform-size, read-only
//! access sequences, plus a driver that replays such a sequence through any
//! [`EvictionPolicy`].

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

use crate::chunk::{ChunkKey, ListKind};
use crate::error::{Error, Result};
use crate::memory::policy::{EvictionContext, EvictionPolicy, MomentLists};
use crate::memory::Device;

pub const ORACLE_MAX_CHUNKS: usize = 6;
pub const ORACLE_MAX_ACCESSES: usize = 12;

/// Minimum number of fetches over every eviction decision tree.
pub fn oracle_min_transfers(access_sequence: &[u32], capacity_in_chunks: usize) -> Result<u32> {
    let mut ids: Vec<u32> = access_sequence.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() > ORACLE_MAX_CHUNKS || access_sequence.len() > ORACLE_MAX_ACCESSES {
        return Err(Error::InstanceTooLarge(format!(
            "{} chunks / {} accesses (limits {ORACLE_MAX_CHUNKS} / {ORACLE_MAX_ACCESSES})",
            ids.len(),
            access_sequence.len()
        )));
    }
    if capacity_in_chunks == 0 {
        return Err(Error::InvalidDimension(
            "capacity must hold at least one chunk".into(),
        ));
    }
    let seq: Vec<u8> = access_sequence
        .iter()
        .map(|c| ids.binary_search(c).unwrap() as u8)
        .collect();
    let mut memo = HashMap::new();
    Ok(search(&seq, 0, 0, capacity_in_chunks, &mut memo))
}

fn search(
    seq: &[u8],
    at: usize,
    cache: u8,
    cap: usize,
    memo: &mut HashMap<(usize, u8), u32>,
) -> u32 {
    if at == seq.len() {
        return 0;
    }
    if let Some(&v) = memo.get(&(at, cache)) {
        return v;
    }
    let bit = 1u8 << seq[at];
    let best = if cache & bit != 0 {
        search(seq, at + 1, cache, cap, memo)
    } else if (cache.count_ones() as usize) < cap {
        1 + search(seq, at + 1, cache | bit, cap, memo)
    } else {
        (0..8)
            .filter(|b| cache & (1 << b) != 0)
            .map(|b| 1 + search(seq, at + 1, (cache & !(1 << b)) | bit, cap, memo))
            .min()
            .unwrap()
    };
    memo.insert((at, cache), best);
    best
}

/// Replays the sequence through `policy`, with access moments equal to
/// sequence positions, and counts fetches.
pub fn simulate_policy_fetches(
    access_sequence: &[u32],
    capacity_in_chunks: usize,
    policy: &dyn EvictionPolicy,
) -> u32 {
    let key = |c: u32| ChunkKey::new(ListKind::ParamFp16, c);
    let mut lists = MomentLists::default();
    for (i, &c) in access_sequence.iter().enumerate() {
        lists.record(Device::Gpu, key(c), i as u32);
    }
    let mut cache: BTreeSet<ChunkKey> = BTreeSet::new();
    let mut fetches = 0;
    for (i, &c) in access_sequence.iter().enumerate() {
        if cache.contains(&key(c)) {
            continue;
        }
        fetches += 1;
        if cache.len() >= capacity_in_chunks {
            let candidates: Vec<ChunkKey> = cache.iter().copied().collect();
            let ctx = EvictionContext {
                device: Device::Gpu,
                moment: i as u32,
                moment_lists: Some(&lists),
            };
            let victim = policy
                .pick_victim(&candidates, &ctx)
                .expect("non-empty cache");
            cache.remove(&victim);
        }
        cache.insert(key(c));
    }
    fetches
}

/// Every access sequence of length `1..=max_len` over at most `max_chunks`
/// chunks, up to relabeling: chunk ids appear in order of first use.
pub fn canonical_sequences(max_chunks: u32, max_len: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut seq = Vec::with_capacity(max_len);
    grow(&mut seq, 0, max_chunks, max_len, &mut out);
    out
}

fn grow(
    seq: &mut Vec<u32>,
    distinct: u32,
    max_chunks: u32,
    max_len: usize,
    out: &mut Vec<Vec<u32>>,
) {
    if !seq.is_empty() {
        out.push(seq.clone());
    }
    if seq.len() == max_len {
        return;
    }
    for c in 0..(distinct + 1).min(max_chunks) {
        seq.push(c);
        grow(seq, distinct.max(c + 1), max_chunks, max_len, out);
        seq.pop();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleMismatch {
    pub sequence: Vec<u32>,
    pub capacity: usize,
    pub policy_fetches: u32,
    pub oracle_fetches: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OracleCheck {
    pub policy: String,
    pub instances: u64,
    pub mismatches: Vec<OracleMismatch>,
}

/// Compares `policy` with the oracle on every canonical instance.
pub fn exhaustive_check(
    policy: &dyn EvictionPolicy,
    max_chunks: u32,
    max_len: usize,
    capacities: &[usize],
) -> Result<OracleCheck> {
    let mut check = OracleCheck {
        policy: policy.name().to_string(),
        instances: 0,
        mismatches: Vec::new(),
    };
    for seq in canonical_sequences(max_chunks, max_len) {
        for &cap in capacities {
            let oracle = oracle_min_transfers(&seq, cap)?;
            let got = simulate_policy_fetches(&seq, cap, policy);
            check.instances += 1;
            if got != oracle {
                check.mismatches.push(OracleMismatch {
                    sequence: seq.clone(),
                    capacity: cap,
                    policy_fetches: got,
                    oracle_fetches: oracle,
                });
            }
        }
    }
    Ok(check)
}
