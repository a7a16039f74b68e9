use num_rational::Ratio;
use proptest::prelude::*;

use chunkstar::baselines::{
    l2l_volume, max_feasible_scale, simulate_ddp, simulate_l2l, simulate_static_offload,
    static_volume, FailureReason, Hardware,
};
use chunkstar::dp::{broadcast_to_chunk_ratio, closed_form_volume, Scheme};
use chunkstar::schema::{build_gpt_schema, standard_ladder, ModelSchema};

const GB: u64 = 1_000_000_000;

/// A schema carrying only a parameter count, for the analytic models.
fn with_params(m: u64) -> ModelSchema {
    ModelSchema {
        num_layers: 1,
        hidden_dim: 1,
        num_heads: 1,
        seq_len: 1,
        vocab_size: 0,
        batch_size: 1,
        param_count: m,
        embedding_param_count: 0,
    }
}

fn hw(gpu: u64, cpu: u64, nproc: u32) -> Hardware {
    Hardware {
        gpu_bytes: gpu,
        cpu_bytes: cpu,
        nproc,
    }
}

#[test]
fn static_offload_calibrated_needs() {
    let m = 3 * GB;
    for p in [1u32, 2, 4, 8] {
        let v = simulate_static_offload(&with_params(m), &hw(u64::MAX, u64::MAX, p), 5 * GB);
        let p = p as u64;
        assert_eq!(v.peak_gpu_bytes, 4 * m / p + 5 * GB);
        assert_eq!(v.peak_cpu_bytes, 16 * m / p + 8 * m);
        assert_eq!(v.per_iteration_cpu_gpu_bytes, 4 * m / p);
    }
    let at_limit = simulate_static_offload(&with_params(m), &hw(4 * m + 5 * GB, 24 * m, 1), 5 * GB);
    assert!(at_limit.feasible);
    let over = simulate_static_offload(&with_params(m), &hw(4 * m + 5 * GB - 1, 24 * m, 1), 5 * GB);
    assert_eq!(over.failure_reason, FailureReason::GpuOom);
}

#[test]
#[ignore = "assumes a 2-bytes-per-parameter GPU term; the static model charges fp16 parameters and gradients"]
fn static_offload_fp16_only_example() {
    let h = hw(32 * GB, 240 * GB, 1);
    assert!(simulate_static_offload(&with_params(4 * GB), &h, 20 * GB).feasible);
    let six = simulate_static_offload(&with_params(6 * GB), &h, 20 * GB);
    assert_eq!(six.failure_reason, FailureReason::GpuOom);
}

#[test]
fn static_offload_runs_out_of_host_memory() {
    let m = 2 * GB;
    let v = simulate_static_offload(&with_params(m), &hw(u64::MAX, 16 * m - 1, 1), 0);
    assert_eq!(v.failure_reason, FailureReason::CpuOom);
    let empty = simulate_static_offload(&with_params(0), &hw(32 * GB, 240 * GB, 1), GB);
    assert!(empty.feasible);
    assert_eq!(empty.per_iteration_cpu_gpu_bytes, 0);
}

#[test]
fn ddp_examples() {
    let h = hw(32 * GB, 240 * GB, 1);
    let two = simulate_ddp(&with_params(2 * GB), &h, 0);
    assert_eq!(two.failure_reason, FailureReason::GpuOom);
    let one = build_gpt_schema(20, 2048, 16, 1024, 50304, 4).unwrap();
    let peak = chunkstar::schema::peak_non_model(&one, true, &Default::default());
    let v = simulate_ddp(&one, &h, peak);
    assert!(v.feasible, "{v:?}");
    assert_eq!(v.per_iteration_cpu_gpu_bytes, 0);
    assert!(simulate_ddp(&with_params(1000 * GB), &hw(u64::MAX, 0, 1), 100 * GB).feasible);
}

#[test]
fn one_layer_l2l_matches_ddp_on_the_gpu() {
    let s = build_gpt_schema(1, 256, 4, 64, 1000, 2).unwrap();
    let ddp_need = simulate_ddp(&s, &hw(u64::MAX, u64::MAX, 1), 1234).peak_gpu_bytes;
    assert_eq!(
        simulate_l2l(&s, &hw(u64::MAX, u64::MAX, 1), 1234).peak_gpu_bytes,
        ddp_need
    );
    for gpu in [ddp_need - 1, ddp_need, ddp_need + 1] {
        let h = hw(gpu, u64::MAX, 1);
        assert_eq!(
            simulate_l2l(&s, &h, 1234).feasible,
            simulate_ddp(&s, &h, 1234).feasible
        );
    }
    let tight = simulate_l2l(&s, &hw(u64::MAX, 18 * s.param_count - 1, 1), 0);
    assert_eq!(tight.failure_reason, FailureReason::CpuOom);
}

#[test]
fn layer_streaming_moves_fourteen_times_the_static_volume() {
    for m in [1u64, 7, GB, 12 * GB] {
        assert_eq!(l2l_volume(m), 14 * static_volume(m, 1));
    }
}

#[test]
fn collective_closed_forms() {
    assert_eq!(
        closed_form_volume(4, GB, Scheme::ChunkCollective),
        Ratio::from_integer(4_500_000_000)
    );
    assert_eq!(
        closed_form_volume(4, GB, Scheme::BroadcastBased),
        Ratio::from_integer(7_500_000_000)
    );
    for scheme in [Scheme::ChunkCollective, Scheme::BroadcastBased] {
        assert_eq!(
            closed_form_volume(1, 12 * GB, scheme),
            Ratio::from_integer(0)
        );
    }
    assert_eq!(broadcast_to_chunk_ratio(1, GB), None);
}

#[test]
fn ladder_search_examples() {
    let ladder = standard_ladder();
    let batches = [4, 8, 16, 32];
    let found = max_feasible_scale(&ladder, &batches, |r, b| {
        Ok(r.nominal_billions <= 4.0 && b <= 16)
    })
    .unwrap();
    assert_eq!(
        (found.label.as_deref(), found.max_batch),
        (Some("4B"), Some(16))
    );
    let none = max_feasible_scale(&ladder, &batches, |_, _| Ok(false)).unwrap();
    assert_eq!((none.rung, none.label, none.max_batch), (None, None, None));
    let all = max_feasible_scale(&ladder, &batches, |_, _| Ok(true)).unwrap();
    assert_eq!(
        (all.rung, all.max_batch),
        (Some(ladder.len() - 1), Some(32))
    );
    let no_batches = max_feasible_scale(&ladder, &[], |_, _| Ok(true)).unwrap();
    assert_eq!(no_batches.rung, None);
}

proptest! {
    #[test]
    fn ladder_search_finds_the_frontier(rung_limit in 0usize..11, batch_limit in 0u64..70) {
        let ladder = standard_ladder();
        let batches = [4u64, 8, 16, 32, 64];
        let feasible = |i: usize, b: u64| i < rung_limit && b <= batch_limit.max(4) && batch_limit >= 4;
        let found = max_feasible_scale(&ladder, &batches, |r, b| {
            let i = ladder.iter().position(|x| x.label == r.label).unwrap();
            Ok(feasible(i, b))
        })
        .unwrap();
        let best_rung = (0..ladder.len()).rev().find(|&i| feasible(i, 4));
        prop_assert_eq!(found.rung, best_rung);
        if let Some(i) = best_rung {
            let best_batch = batches.iter().copied().filter(|&b| feasible(i, b)).max();
            prop_assert_eq!(found.max_batch, best_batch);
        }
    }

    #[test]
    fn chunk_collectives_beat_broadcast_by_five_thirds(p in 2u32..64, m in 1u64..1_000_000_000_000) {
        prop_assert_eq!(broadcast_to_chunk_ratio(p, m), Some(Ratio::new(5u128, 3)));
    }

    #[test]
    fn static_feasibility_is_monotone_in_size(m in 0u64..20 * GB, p in 1u32..9) {
        let h = hw(32 * GB, 240 * GB, p);
        if simulate_static_offload(&with_params(m + GB), &h, GB).feasible {
            prop_assert!(simulate_static_offload(&with_params(m), &h, GB).feasible);
        }
    }
}
