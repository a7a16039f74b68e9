//! Analytic feasibility and volume models for the comparison systems, and
//! the ladder search shared by every strategy.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::schema::{ModelSchema, ScaleRung, FP16_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hardware {
    pub gpu_bytes: u64,
    /// Host memory shared by all processes.
    pub cpu_bytes: u64,
    pub nproc: u32,
}

impl Hardware {
    pub fn per_process_cpu_bytes(&self) -> u64 {
        self.cpu_bytes / self.nproc.max(1) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FailureReason {
    GpuOom,
    CpuOom,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineVerdict {
    pub strategy: String,
    pub feasible: bool,
    pub failure_reason: FailureReason,
    pub per_iteration_cpu_gpu_bytes: u64,
    pub peak_gpu_bytes: u64,
    pub peak_cpu_bytes: u64,
}

impl BaselineVerdict {
    /// GPU is checked before CPU, so a model that overflows both reports
    /// GPU_OOM.
    pub fn from_needs(
        strategy: &str,
        gpu_need: u64,
        cpu_need: u64,
        hw: &Hardware,
        volume: u64,
    ) -> Self {
        let failure_reason = if gpu_need > hw.gpu_bytes {
            FailureReason::GpuOom
        } else if cpu_need > hw.per_process_cpu_bytes() {
            FailureReason::CpuOom
        } else {
            FailureReason::None
        };
        BaselineVerdict {
            strategy: strategy.to_string(),
            feasible: failure_reason == FailureReason::None,
            failure_reason,
            per_iteration_cpu_gpu_bytes: volume,
            peak_gpu_bytes: gpu_need,
            peak_cpu_bytes: cpu_need,
        }
    }
}

/// Static partition: fp16 parameters and a same-sized fp16 gradient buffer
/// split over the GPUs; fp32 parameters and moments partitioned in host
/// memory, plus 8 bytes per parameter replicated in every process for its
/// double-buffered fp16 parameter and gradient staging.
pub fn simulate_static_offload(
    schema: &ModelSchema,
    hw: &Hardware,
    peak_non_model: u64,
) -> BaselineVerdict {
    let m = schema.param_count;
    let p = hw.nproc.max(1) as u64;
    let gpu_need = 2 * FP16_BYTES * m / p + peak_non_model;
    let cpu_need = 16 * m / p + 2 * 2 * FP16_BYTES * m;
    BaselineVerdict::from_needs("static", gpu_need, cpu_need, hw, 4 * m / p)
}

/// Everything on the GPU, replicated per process.
pub fn simulate_ddp(schema: &ModelSchema, hw: &Hardware, peak_non_model: u64) -> BaselineVerdict {
    let gpu_need =
        (18 * schema.param_count as u128 + peak_non_model as u128).min(u64::MAX as u128) as u64;
    BaselineVerdict::from_needs("ddp", gpu_need, 0, hw, 0)
}

/// Layer streaming: one layer's full model data on the GPU at a time, the
/// rest in host memory. The embedding travels with the first layer, so a
/// one-layer model needs exactly what DDP needs on the GPU.
pub fn simulate_l2l(schema: &ModelSchema, hw: &Hardware, peak_non_model: u64) -> BaselineVerdict {
    let layers = (schema.param_count - schema.embedding_param_count) / schema.num_layers.max(1);
    let first = layers + schema.embedding_param_count;
    let gpu_need = 18 * first + peak_non_model;
    let cpu_need = 18 * schema.param_count;
    BaselineVerdict::from_needs(
        "l2l",
        gpu_need,
        cpu_need,
        hw,
        l2l_volume(schema.param_count),
    )
}

/// FWD and BWD each stream every layer's fp16 parameters, gradients and
/// optimizer state in and out: 2 passes × 2 directions × 14 bytes.
pub fn l2l_volume(m: u64) -> u64 {
    2 * 2 * 14 * m
}

pub fn static_volume(m: u64, p: u32) -> u64 {
    4 * m / p.max(1) as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScaleResult {
    /// Index into the ladder, `None` when not even the first rung fits.
    pub rung: Option<usize>,
    pub label: Option<String>,
    pub max_batch: Option<u64>,
}

/// Binary search for the largest feasible rung, then the largest feasible
/// batch at that rung. `feasible(rung, batch)` must be monotone: smaller
/// rungs and smaller batches are never harder.
pub fn max_feasible_scale<F>(
    ladder: &[ScaleRung],
    batches: &[u64],
    mut feasible: F,
) -> Result<ScaleResult>
where
    F: FnMut(&ScaleRung, u64) -> Result<bool>,
{
    let mut batches = batches.to_vec();
    batches.sort_unstable();
    batches.dedup();
    let none = ScaleResult {
        rung: None,
        label: None,
        max_batch: None,
    };
    let Some(&smallest) = batches.first() else {
        return Ok(none);
    };
    let (mut lo, mut hi) = (0usize, ladder.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if feasible(&ladder[mid], smallest)? {
            lo = mid + 1;
        } else {
            hi = mid;
        }
    }
    if lo == 0 {
        return Ok(none);
    }
    let rung = lo - 1;
    let (mut blo, mut bhi) = (1usize, batches.len());
    while blo < bhi {
        let mid = (blo + bhi) / 2;
        if feasible(&ladder[rung], batches[mid])? {
            blo = mid + 1;
        } else {
            bhi = mid;
        }
    }
    Ok(ScaleResult {
        rung: Some(rung),
        label: Some(ladder[rung].label.clone()),
        max_batch: Some(batches[blo - 1]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{build_gpt_schema, standard_ladder};

    fn hw(gpu: u64, cpu: u64, p: u32) -> Hardware {
        Hardware {
            gpu_bytes: gpu,
            cpu_bytes: cpu,
            nproc: p,
        }
    }

    #[test]
    fn verdict_reasons() {
        let s = build_gpt_schema(1, 64, 4, 16, 100, 1).unwrap();
        let v = simulate_ddp(&s, &hw(u64::MAX, 0, 1), 0);
        assert!(v.feasible);
        assert_eq!(v.failure_reason, FailureReason::None);
        let v = simulate_static_offload(&s, &hw(u64::MAX, 10, 1), 0);
        assert_eq!(v.failure_reason, FailureReason::CpuOom);
        assert!(!v.feasible);
    }

    #[test]
    fn l2l_to_static_ratio_is_fourteen() {
        assert_eq!(l2l_volume(1_000) / static_volume(1_000, 1), 14);
    }

    #[test]
    fn ladder_search() {
        let ladder = standard_ladder();
        let r = max_feasible_scale(&ladder, &[4, 8, 16], |rung, batch| {
            Ok(rung.nominal_billions * batch as f64 <= 16.0)
        })
        .unwrap();
        assert_eq!(r.label.as_deref(), Some("4B"));
        assert_eq!(r.max_batch, Some(4));
        let r = max_feasible_scale(&ladder, &[4], |_, _| Ok(false)).unwrap();
        assert_eq!(r.rung, None);
    }
}
