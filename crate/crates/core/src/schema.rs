//! GPT-like model descriptions, their operator timelines and the analytical
//! memory footprint of model and non-model data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FP16_BYTES: u64 = 2;
pub const FP32_BYTES: u64 = 4;

/// Default runtime-context overhead charged to the GPU at every moment.
pub const DEFAULT_CONTEXT_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSchema {
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub num_heads: u64,
    pub seq_len: u64,
    pub vocab_size: u64,
    pub batch_size: u64,
    /// 12·L·H² + V·H
    pub param_count: u64,
    /// V·H
    pub embedding_param_count: u64,
}

pub fn build_gpt_schema(
    layers: u64,
    hidden_dim: u64,
    heads: u64,
    seq_len: u64,
    vocab: u64,
    batch: u64,
) -> Result<ModelSchema> {
    for (name, v) in [
        ("layers", layers),
        ("hidden_dim", hidden_dim),
        ("heads", heads),
        ("seq_len", seq_len),
        ("vocab", vocab),
        ("batch", batch),
    ] {
        if v == 0 {
            return Err(Error::InvalidDimension(format!("{name} must be positive")));
        }
    }
    if hidden_dim % heads != 0 {
        return Err(Error::InvalidDimension(format!(
            "hidden_dim {hidden_dim} not divisible by heads {heads}"
        )));
    }
    let embedding_param_count = vocab * hidden_dim;
    Ok(ModelSchema {
        num_layers: layers,
        hidden_dim,
        num_heads: heads,
        seq_len,
        vocab_size: vocab,
        batch_size: batch,
        param_count: 12 * layers * hidden_dim * hidden_dim + embedding_param_count,
        embedding_param_count,
    })
}

impl ModelSchema {
    pub fn with_batch(&self, batch: u64) -> Result<ModelSchema> {
        build_gpt_schema(
            self.num_layers,
            self.hidden_dim,
            self.num_heads,
            self.seq_len,
            self.vocab_size,
            batch,
        )
    }

    /// Bytes of one fp16 activation of shape (B, S, H).
    pub fn bsh_bytes(&self) -> u64 {
        self.batch_size * self.seq_len * self.hidden_dim * FP16_BYTES
    }

    /// Attention scores plus softmax probabilities, fp16.
    pub fn attention_score_bytes(&self) -> u64 {
        2 * self.batch_size * self.num_heads * self.seq_len * self.seq_len * FP16_BYTES
    }

    /// Parameters of one transformer layer, biases and layer norms included.
    pub fn layer_param_count(&self) -> u64 {
        LayerOp::ALL
            .iter()
            .flat_map(|op| op.tensor_shapes(self.hidden_dim))
            .map(|(_, n)| n)
            .sum()
    }

    /// Parameters that live in chunks (everything except the embedding).
    pub fn chunked_param_count(&self) -> u64 {
        self.num_layers * self.layer_param_count()
    }
}

/// Model-data bytes for M parameters under mixed-precision ADAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub param_fp16_bytes: u64,
    pub grad_fp16_bytes: u64,
    /// momentum + variance + param fp32
    pub os_bytes: u64,
    /// The headline 2 + 2 + 14 accounting.
    pub nominal_total_bytes: u64,
    /// 2 + 2 + 12, the sum of the enumerated components.
    pub component_total_bytes: u64,
}

impl MemoryBudget {
    pub fn for_params(m: u64) -> Self {
        let param_fp16_bytes = FP16_BYTES * m;
        let grad_fp16_bytes = FP16_BYTES * m;
        let os_bytes = 3 * FP32_BYTES * m;
        MemoryBudget {
            param_fp16_bytes,
            grad_fp16_bytes,
            os_bytes,
            nominal_total_bytes: 18 * m,
            component_total_bytes: param_fp16_bytes + grad_fp16_bytes + os_bytes,
        }
    }
}

pub fn model_data_bytes(schema: &ModelSchema) -> MemoryBudget {
    MemoryBudget::for_params(schema.param_count)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Fwd,
    Bwd,
    ReFwd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    ComputeIntensive,
    MemoryIntensive,
    Embedding,
}

/// The four compute operators a transformer layer is decomposed into.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    AttnQkv,
    AttnOut,
    MlpIn,
    MlpOut,
}

impl LayerOp {
    pub const ALL: [LayerOp; 4] = [
        LayerOp::AttnQkv,
        LayerOp::AttnOut,
        LayerOp::MlpIn,
        LayerOp::MlpOut,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerOp::AttnQkv => "attn_qkv",
            LayerOp::AttnOut => "attn_out",
            LayerOp::MlpIn => "mlp_in",
            LayerOp::MlpOut => "mlp_out",
        }
    }

    /// Parameter tensors touched by this operator, in initialization order.
    pub fn tensor_shapes(self, h: u64) -> Vec<(&'static str, u64)> {
        match self {
            LayerOp::AttnQkv => vec![
                ("ln1_w", h),
                ("ln1_b", h),
                ("qkv_w", 3 * h * h),
                ("qkv_b", 3 * h),
            ],
            LayerOp::AttnOut => vec![("proj_w", h * h), ("proj_b", h)],
            LayerOp::MlpIn => vec![
                ("ln2_w", h),
                ("ln2_b", h),
                ("fc1_w", 4 * h * h),
                ("fc1_b", 4 * h),
            ],
            LayerOp::MlpOut => vec![("fc2_w", 4 * h * h), ("fc2_b", h)],
        }
    }

    /// Activation bytes the operator keeps alive until its backward pass,
    /// split into (intra-layer, layer-boundary) parts.
    fn activation_split(self, schema: &ModelSchema) -> (u64, u64) {
        let a = schema.bsh_bytes();
        match self {
            LayerOp::AttnQkv => (4 * a + schema.attention_score_bytes(), 0),
            LayerOp::AttnOut => (2 * a, 0),
            LayerOp::MlpIn => (9 * a, 0),
            LayerOp::MlpOut => (0, a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub id: u32,
    pub layer: u32,
    pub op: LayerOp,
    pub name: &'static str,
    pub numel: u64,
}

/// Chunk-managed parameter tensors in model initialization order.
pub fn param_tensors(schema: &ModelSchema) -> Vec<ParamTensor> {
    let mut out = Vec::new();
    for layer in 0..schema.num_layers as u32 {
        for op in LayerOp::ALL {
            for (name, numel) in op.tensor_shapes(schema.hidden_dim) {
                out.push(ParamTensor {
                    id: out.len() as u32,
                    layer,
                    op,
                    name,
                    numel,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorEvent {
    pub op_id: u32,
    pub phase: Phase,
    pub layer: u32,
    pub op: Option<LayerOp>,
    /// fp16 parameter tensors the operator computes with.
    pub tensor_refs: Vec<u32>,
    /// Positive deltas are allocated at the start moment, negative ones freed
    /// at the finish moment.
    pub activation_delta_bytes: i64,
    pub kind: OpKind,
}

impl OperatorEvent {
    pub fn label(&self) -> String {
        let phase = match self.phase {
            Phase::Fwd => "FWD",
            Phase::Bwd => "BWD",
            Phase::ReFwd => "RE_FWD",
            Phase::Adam => "ADAM",
        };
        match self.op {
            Some(op) => format!("{phase}(L{}.{})", self.layer, op.name()),
            None => format!("{phase}(L{})", self.layer),
        }
    }

    pub fn start_moment(index: usize) -> u32 {
        2 * index as u32 + 1
    }

    pub fn finish_moment(index: usize) -> u32 {
        2 * index as u32 + 2
    }
}

/// Moment 0 precedes the first event; event `i` starts at `2i+1` and
/// finishes at `2i+2`.
pub fn moment_count(timeline: &[OperatorEvent]) -> usize {
    2 * timeline.len() + 1
}

pub fn build_event_timeline(schema: &ModelSchema, checkpoint_enabled: bool) -> Vec<OperatorEvent> {
    let tensors = param_tensors(schema);
    let refs = |layer: u32, op: LayerOp| -> Vec<u32> {
        tensors
            .iter()
            .filter(|t| t.layer == layer && t.op == op)
            .map(|t| t.id)
            .collect()
    };
    let mut events: Vec<OperatorEvent> = Vec::new();
    let push =
        |events: &mut Vec<OperatorEvent>, phase, layer, op: Option<LayerOp>, delta: i64, kind| {
            let tensor_refs = match op {
                Some(op) => refs(layer, op),
                None => tensors
                    .iter()
                    .filter(|t| t.layer == layer)
                    .map(|t| t.id)
                    .collect(),
            };
            events.push(OperatorEvent {
                op_id: events.len() as u32,
                phase,
                layer,
                op,
                tensor_refs,
                activation_delta_bytes: delta,
                kind,
            });
        };
    let layers = schema.num_layers as u32;

    for layer in 0..layers {
        for op in LayerOp::ALL {
            let (intra, boundary) = op.activation_split(schema);
            let kept = if checkpoint_enabled {
                boundary
            } else {
                intra + boundary
            };
            push(
                &mut events,
                Phase::Fwd,
                layer,
                Some(op),
                kept as i64,
                OpKind::ComputeIntensive,
            );
        }
    }
    for layer in (0..layers).rev() {
        if checkpoint_enabled {
            for op in LayerOp::ALL {
                let (intra, _) = op.activation_split(schema);
                push(
                    &mut events,
                    Phase::ReFwd,
                    layer,
                    Some(op),
                    intra as i64,
                    OpKind::ComputeIntensive,
                );
            }
        }
        for op in LayerOp::ALL.iter().rev() {
            let (intra, boundary) = op.activation_split(schema);
            push(
                &mut events,
                Phase::Bwd,
                layer,
                Some(*op),
                -((intra + boundary) as i64),
                OpKind::ComputeIntensive,
            );
        }
    }
    for layer in 0..layers {
        push(
            &mut events,
            Phase::Adam,
            layer,
            None,
            0,
            OpKind::MemoryIntensive,
        );
    }
    events
}

/// Analytical non-model data model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationModel {
    pub context_bytes: u64,
    /// Multiplier on activation bytes standing in for allocator fragmentation.
    pub fragmentation: f64,
}

impl Default for ActivationModel {
    fn default() -> Self {
        ActivationModel {
            context_bytes: DEFAULT_CONTEXT_BYTES,
            fragmentation: 1.0,
        }
    }
}

impl ActivationModel {
    /// Non-model bytes at every moment of the timeline.
    pub fn curve(&self, timeline: &[OperatorEvent]) -> Vec<u64> {
        let mut out = Vec::with_capacity(moment_count(timeline));
        let mut live: i64 = 0;
        out.push(self.charge(live));
        for ev in timeline {
            if ev.activation_delta_bytes > 0 {
                live += ev.activation_delta_bytes;
            }
            out.push(self.charge(live));
            if ev.activation_delta_bytes < 0 {
                live += ev.activation_delta_bytes;
            }
            out.push(self.charge(live));
        }
        out
    }

    fn charge(&self, live: i64) -> u64 {
        debug_assert!(live >= 0);
        let act = live.max(0) as u64;
        let scaled = if self.fragmentation == 1.0 {
            act
        } else {
            (act as f64 * self.fragmentation).round() as u64
        };
        self.context_bytes + scaled
    }

    pub fn peak(&self, timeline: &[OperatorEvent]) -> u64 {
        self.curve(timeline)
            .into_iter()
            .max()
            .unwrap_or(self.context_bytes)
    }
}

pub fn activation_bytes_at(
    timeline: &[OperatorEvent],
    moment_index: usize,
    model: &ActivationModel,
) -> Result<u64> {
    let len = moment_count(timeline);
    if moment_index >= len {
        return Err(Error::MomentOutOfRange {
            moment: moment_index,
            len,
        });
    }
    Ok(model.curve(timeline)[moment_index])
}

/// Peak non-model bytes of a schema under the given activation model.
pub fn peak_non_model(
    schema: &ModelSchema,
    checkpoint_enabled: bool,
    model: &ActivationModel,
) -> u64 {
    model.peak(&build_event_timeline(schema, checkpoint_enabled))
}

/// One row of a model-size ladder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRung {
    pub label: String,
    /// Nominal size in billions of parameters, used when comparing scales.
    pub nominal_billions: f64,
    pub layers: u64,
    pub hidden_dim: u64,
}

impl ScaleRung {
    pub fn new(label: &str, nominal_billions: f64, layers: u64, hidden_dim: u64) -> Self {
        ScaleRung {
            label: label.to_string(),
            nominal_billions,
            layers,
            hidden_dim,
        }
    }
}

pub const GPT2_VOCAB: u64 = 50304;
pub const DEFAULT_HEADS: u64 = 16;
pub const DEFAULT_SEQ_LEN: u64 = 1024;

/// The GPT-like ladder used for feasibility sweeps; the sub-billion rungs
/// cover desktop-class hardware.
pub fn standard_ladder() -> Vec<ScaleRung> {
    vec![
        ScaleRung::new("0.11B", 0.11, 12, 768),
        ScaleRung::new("0.35B", 0.35, 24, 1024),
        ScaleRung::new("0.7B", 0.7, 36, 1280),
        ScaleRung::new("1B", 1.0, 20, 2048),
        ScaleRung::new("2B", 2.0, 40, 2048),
        ScaleRung::new("4B", 4.0, 64, 2304),
        ScaleRung::new("6B", 6.0, 53, 3072),
        ScaleRung::new("8B", 8.0, 72, 3072),
        ScaleRung::new("10B", 10.0, 50, 4096),
        ScaleRung::new("12B", 12.0, 60, 4096),
    ]
}
