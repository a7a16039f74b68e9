//! TOML scenario configuration.
//!
//! Byte and element counts accept integers or suffixed strings: `"32GB"` is
//! 32·10⁹, `"1GiB"` is 2³⁰, `"144Mi"` is 144·2²⁰.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::baselines::Hardware;
use crate::chunk::DEFAULT_CHUNK_CAPACITY_ELEMS;
use crate::error::{Error, Result};
use crate::memory::PolicyRegistry;
use crate::profiler::DEFAULT_LIMIT_FRACTION;
use crate::schema::{
    build_gpt_schema, standard_ladder, ActivationModel, ModelSchema, ScaleRung,
    DEFAULT_CONTEXT_BYTES, DEFAULT_HEADS, DEFAULT_SEQ_LEN, GPT2_VOCAB,
};
use crate::strategy::PolicySettings;

/// A byte or element count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct Size(pub u64);

impl<'de> Deserialize<'de> for Size {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Size(v)),
            Raw::Text(s) => parse_size::parse_size(s.trim())
                .map(Size)
                .map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: u64,
    pub hidden_dim: u64,
    #[serde(default = "default_heads")]
    pub heads: u64,
    #[serde(default = "default_seq_len")]
    pub seq_len: u64,
    #[serde(default = "default_vocab")]
    pub vocab: u64,
    #[serde(default = "default_batch")]
    pub batch: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareConfig {
    #[serde(default = "one")]
    pub gpu_count: u32,
    pub gpu_bytes: Size,
    /// Host memory shared by all GPUs.
    pub cpu_bytes: Size,
    #[serde(default = "default_pcie")]
    pub pcie_gbps: f64,
    #[serde(default = "default_intra")]
    pub intra_gpu_gbps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    #[serde(default = "default_capacity")]
    pub chunk_capacity: Size,
    #[serde(default = "default_eviction")]
    pub eviction: String,
    #[serde(default = "default_limit")]
    pub limit_fraction: f64,
    #[serde(default = "yes")]
    pub checkpoint: bool,
    #[serde(default = "default_context")]
    pub context_bytes: Size,
    #[serde(default = "default_fragmentation")]
    pub fragmentation: f64,
    /// Audit pools and the location constraint at every moment.
    #[serde(default = "yes")]
    pub validate: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            chunk_capacity: default_capacity(),
            eviction: default_eviction(),
            limit_fraction: default_limit(),
            checkpoint: true,
            context_bytes: default_context(),
            fragmentation: default_fragmentation(),
            validate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RungConfig {
    pub label: String,
    pub nominal_billions: f64,
    pub layers: u64,
    pub hidden_dim: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<u64>,
    #[serde(default = "default_gpu_counts")]
    pub gpu_counts: Vec<u32>,
    /// Defaults to the standard GPT ladder.
    #[serde(default)]
    pub ladder: Option<Vec<RungConfig>>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            batch_sizes: default_batches(),
            gpu_counts: default_gpu_counts(),
            ladder: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub seed: u64,
    /// Warm-up included.
    #[serde(default = "default_iterations")]
    pub iterations: u32,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    pub model: ModelConfig,
    pub hardware: HardwareConfig,
    #[serde(default)]
    pub policy: PolicyConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_heads() -> u64 {
    DEFAULT_HEADS
}
fn default_seq_len() -> u64 {
    DEFAULT_SEQ_LEN
}
fn default_vocab() -> u64 {
    GPT2_VOCAB
}
fn default_batch() -> u64 {
    8
}
fn one() -> u32 {
    1
}
fn yes() -> bool {
    true
}
fn default_pcie() -> f64 {
    12.0
}
fn default_intra() -> f64 {
    100.0
}
fn default_capacity() -> Size {
    Size(DEFAULT_CHUNK_CAPACITY_ELEMS)
}
fn default_eviction() -> String {
    "latest-next-use".to_string()
}
fn default_limit() -> f64 {
    DEFAULT_LIMIT_FRACTION
}
fn default_context() -> Size {
    Size(DEFAULT_CONTEXT_BYTES)
}
fn default_fragmentation() -> f64 {
    1.0
}
fn default_batches() -> Vec<u64> {
    vec![4, 8, 16, 32, 64]
}
fn default_gpu_counts() -> Vec<u32> {
    vec![1, 2, 4, 8]
}
fn default_iterations() -> u32 {
    3
}
fn default_strategies() -> Vec<String> {
    vec!["chunk".into(), "static".into(), "ddp".into()]
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.hardware.gpu_bytes.0 == 0 || self.hardware.cpu_bytes.0 == 0 {
            return bad("hardware capacities must be positive");
        }
        if self.hardware.gpu_count == 0 {
            return bad("hardware.gpu_count must be positive");
        }
        if self.strategies.is_empty() {
            return bad("strategies must not be empty");
        }
        if !(self.policy.limit_fraction > 0.0 && self.policy.limit_fraction <= 1.0) {
            return bad("policy.limit_fraction must be in (0, 1]");
        }
        if !(self.policy.fragmentation >= 1.0) {
            return bad("policy.fragmentation must be at least 1.0");
        }
        if self.policy.chunk_capacity.0 == 0 {
            return bad("policy.chunk_capacity must be positive");
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if self.hardware.pcie_gbps <= 0.0 || self.hardware.intra_gpu_gbps <= 0.0 {
            return bad("bandwidths must be positive");
        }
        if self.sweep.batch_sizes.is_empty() || self.sweep.batch_sizes.contains(&0) {
            return bad("sweep.batch_sizes must be non-empty and positive");
        }
        if self.sweep.gpu_counts.is_empty() || self.sweep.gpu_counts.contains(&0) {
            return bad("sweep.gpu_counts must be non-empty and positive");
        }
        PolicyRegistry::with_builtins().get(&self.policy.eviction)?;
        self.schema()
            .map_err(|e| Error::Config(format!("model: {e}")))?;
        Ok(())
    }

    pub fn schema(&self) -> Result<ModelSchema> {
        let m = &self.model;
        build_gpt_schema(m.layers, m.hidden_dim, m.heads, m.seq_len, m.vocab, m.batch)
    }

    /// Schema of a ladder rung with this config's heads, sequence and vocab.
    pub fn rung_schema(&self, rung: &ScaleRung, batch: u64) -> Result<ModelSchema> {
        let m = &self.model;
        build_gpt_schema(
            rung.layers,
            rung.hidden_dim,
            m.heads,
            m.seq_len,
            m.vocab,
            batch,
        )
    }

    pub fn hardware(&self) -> Hardware {
        self.hardware_with(self.hardware.gpu_count)
    }

    pub fn hardware_with(&self, nproc: u32) -> Hardware {
        Hardware {
            gpu_bytes: self.hardware.gpu_bytes.0,
            cpu_bytes: self.hardware.cpu_bytes.0,
            nproc,
        }
    }

    pub fn activation(&self) -> ActivationModel {
        ActivationModel {
            context_bytes: self.policy.context_bytes.0,
            fragmentation: self.policy.fragmentation,
        }
    }

    pub fn policy_settings(&self, trace: bool) -> Result<PolicySettings> {
        Ok(PolicySettings {
            capacity_elems: self.policy.chunk_capacity.0,
            eviction: PolicyRegistry::with_builtins().get(&self.policy.eviction)?,
            limit_fraction: self.policy.limit_fraction,
            checkpoint: self.policy.checkpoint,
            activation: self.activation(),
            iterations: self.iterations,
            validate: self.policy.validate,
            trace,
        })
    }

    pub fn ladder(&self) -> Vec<ScaleRung> {
        match &self.sweep.ladder {
            Some(rungs) => rungs
                .iter()
                .map(|r| ScaleRung::new(&r.label, r.nominal_billions, r.layers, r.hidden_dim))
                .collect(),
            None => standard_ladder(),
        }
    }
}

/// Transfer time at configured bandwidths. Compute time is not modeled, so
/// these are only meaningful relative to each other.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeEstimate {
    pub transfer_seconds: f64,
    pub collective_seconds: f64,
    pub note: &'static str,
}

impl TimeEstimate {
    pub fn new(cpu_gpu_bytes: u64, collective_bytes: u64, hw: &HardwareConfig) -> Self {
        TimeEstimate {
            transfer_seconds: cpu_gpu_bytes as f64 / (hw.pcie_gbps * 1e9),
            collective_seconds: collective_bytes as f64 / (hw.intra_gpu_gbps * 1e9),
            note: "model-relative; compute time excluded",
        }
    }
}
