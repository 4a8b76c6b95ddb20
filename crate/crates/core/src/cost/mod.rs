//! Analytic roofline cost model for transformer inference.
//!
//! Converts (model, device, batch shape) into per-operation FLOP and byte
//! counts, arithmetic intensities, and prefill/decode iteration times. The
//! per-operation costs cover the six dominant matrix multiplications of a
//! transformer layer (QKV projection, the two attention products, output
//! projection, and the two FFN projections); softmax and layer norm are
//! absorbed into a configurable per-layer overhead (default 0).
//!
//! Times are the per-operation maximum of the compute term and the memory
//! term, scaled by calibrated efficiency factors and the tensor-parallel
//! degree, then multiplied by `1 + comm_overhead_fraction` for all-reduce
//! cost. Byte counts are element counts scaled by `bytes_per_element`.
//!
//! Unit conventions: "GB/s" figures quoted for KV-transfer bandwidth are
//! interpreted as GiB/s (2^30 bytes/s) and per-token KV sizes in "MB" as MiB;
//! these are the only interpretations under which the per-token KV size of
//! Llama-30B (1,597,440 bytes = 1.52 MiB) reproduces the published
//! bandwidth-requirement table.

mod calibrate;

pub use calibrate::{fit_compute_efficiency, CalibrationError};

use serde::{Deserialize, Serialize};
use std::fmt::{Debug, Display};
use thiserror::Error;

/// Scalar type the cost model is generic over: `f32` or `f64`.
pub trait Scalar:
    num_traits::Float + num_traits::FromPrimitive + Debug + Display + Copy + 'static
{
    fn from_count(v: u64) -> Self {
        Self::from_u64(v).expect("count representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("model `{model}`: {reason}")]
    InvalidModel { model: String, reason: String },
    #[error("device `{device}`: {reason}")]
    InvalidDevice { device: String, reason: String },
    #[error("instance config: {0}")]
    InvalidInstance(String),
}

/// Transformer model parameters feeding the cost model.
///
/// `kv_groups` is the GQA grouping factor (query heads per KV head); 1 means
/// standard multi-head attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub name: String,
    pub layer_num: u64,
    pub hidden_size: u64,
    pub heads: u64,
    pub size_per_head: u64,
    pub kv_groups: u64,
    pub bytes_per_element: u64,
    pub weights_bytes: u64,
}

impl ModelProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let fail = |reason: String| ProfileError::InvalidModel {
            model: self.name.clone(),
            reason,
        };
        for (field, v) in [
            ("layer_num", self.layer_num),
            ("hidden_size", self.hidden_size),
            ("heads", self.heads),
            ("size_per_head", self.size_per_head),
            ("kv_groups", self.kv_groups),
            ("bytes_per_element", self.bytes_per_element),
            ("weights_bytes", self.weights_bytes),
        ] {
            if v == 0 {
                return Err(fail(format!("{field} must be >= 1")));
            }
        }
        if self.hidden_size != self.heads * self.size_per_head {
            return Err(fail(format!(
                "hidden_size {} != heads {} * size_per_head {}",
                self.hidden_size, self.heads, self.size_per_head
            )));
        }
        if self.heads % self.kv_groups != 0 {
            return Err(fail(format!(
                "kv_groups {} does not divide heads {}",
                self.kv_groups, self.heads
            )));
        }
        Ok(())
    }

    /// KV-cache bytes written per token: `2 * L * (H / kv_groups) * e`
    /// (key and value embeddings across all layers, shrunk by GQA grouping).
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.layer_num * (self.hidden_size / self.kv_groups) * self.bytes_per_element
    }
}

/// Raw device capabilities plus calibrated efficiency factors.
///
/// Efficiencies are fitted per (model, device) pair so the analytic prefill
/// rate of an 8-GPU node matches measured KV-generation speeds; see
/// [`fit_compute_efficiency`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile<T> {
    pub name: String,
    pub peak_flops: T,
    pub mem_bandwidth: T,
    pub mem_capacity: u64,
    pub compute_efficiency: T,
    pub bandwidth_efficiency: T,
}

impl<T: Scalar> DeviceProfile<T> {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let fail = |reason: &str| ProfileError::InvalidDevice {
            device: self.name.clone(),
            reason: reason.to_string(),
        };
        let zero = T::zero();
        let one = T::one();
        if self.peak_flops <= zero || self.mem_bandwidth <= zero {
            return Err(fail("peak_flops and mem_bandwidth must be > 0"));
        }
        if self.mem_capacity == 0 {
            return Err(fail("mem_capacity must be > 0"));
        }
        if self.compute_efficiency <= zero || self.compute_efficiency > one {
            return Err(fail("compute_efficiency must be in (0, 1]"));
        }
        if self.bandwidth_efficiency <= zero || self.bandwidth_efficiency > one {
            return Err(fail("bandwidth_efficiency must be in (0, 1]"));
        }
        Ok(())
    }
}

/// One inference instance: a model replica spread over `device_count` GPUs
/// with tensor parallelism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig<T> {
    pub model: ModelProfile,
    pub device: DeviceProfile<T>,
    pub device_count: u64,
    pub tp_degree: u64,
    pub comm_overhead_fraction: T,
    pub kv_capacity_bytes: u64,
    pub switch_overhead: T,
    /// Fixed per-layer time absorbing softmax/layer-norm/sampling.
    pub per_layer_overhead: T,
}

impl<T: Scalar> InstanceConfig<T> {
    pub fn validate(&self) -> Result<(), ProfileError> {
        self.model.validate()?;
        self.device.validate()?;
        if self.tp_degree != self.device_count {
            return Err(ProfileError::InvalidInstance(format!(
                "tp_degree {} must equal device_count {} (pipeline-parallel instances unsupported)",
                self.tp_degree, self.device_count
            )));
        }
        if self.comm_overhead_fraction < T::zero() {
            return Err(ProfileError::InvalidInstance(
                "comm_overhead_fraction must be >= 0".into(),
            ));
        }
        let total_mem = self.device_count * self.device.mem_capacity;
        let headroom = total_mem.saturating_sub(self.model.weights_bytes);
        if self.model.weights_bytes > total_mem {
            return Err(ProfileError::InvalidInstance(format!(
                "weights ({} B) exceed aggregate device memory ({} B)",
                self.model.weights_bytes, total_mem
            )));
        }
        if self.kv_capacity_bytes > headroom {
            return Err(ProfileError::InvalidInstance(format!(
                "kv_capacity_bytes {} exceeds memory headroom {} (device_count * mem_capacity - weights)",
                self.kv_capacity_bytes, headroom
            )));
        }
        if self.kv_capacity_bytes == 0 {
            return Err(ProfileError::InvalidInstance(
                "kv_capacity_bytes must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// Aggregate effective compute rate (FLOP/s) across the TP group.
    fn effective_flops(&self) -> T {
        self.device.compute_efficiency * self.device.peak_flops * T::from_count(self.tp_degree)
    }

    /// Aggregate effective memory bandwidth (B/s) across the TP group.
    fn effective_bandwidth(&self) -> T {
        self.device.bandwidth_efficiency * self.device.mem_bandwidth * T::from_count(self.tp_degree)
    }
}

/// Inference phase of a batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Prefill,
    Decode,
}

/// Shape of one batched iteration. For decode batches `seq_len` is the mean
/// KV length per request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchShape {
    pub phase: Phase,
    pub batch_size: u64,
    pub seq_len: u64,
}

impl BatchShape {
    pub fn prefill(batch_size: u64, seq_len: u64) -> Self {
        Self { phase: Phase::Prefill, batch_size, seq_len }
    }

    pub fn decode(batch_size: u64, seq_len: u64) -> Self {
        Self { phase: Phase::Decode, batch_size, seq_len }
    }

    fn assert_valid(&self) {
        assert!(self.batch_size >= 1, "batch_size must be >= 1");
        assert!(self.seq_len >= 1, "seq_len must be >= 1");
    }
}

/// The six dominant matrix multiplications of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    QkvProjection,
    AttentionQk,
    AttentionAv,
    OutputProjection,
    DimExpansion,
    DimReduction,
}

impl OpKind {
    pub const ALL: [OpKind; 6] = [
        OpKind::QkvProjection,
        OpKind::AttentionQk,
        OpKind::AttentionAv,
        OpKind::OutputProjection,
        OpKind::DimExpansion,
        OpKind::DimReduction,
    ];
}

/// FLOPs and memory-access bytes of one operation over one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpCost<T> {
    pub flops: T,
    pub bytes: T,
}

/// Per-layer FLOPs and memory bytes of `op` for the given batch shape.
///
/// FLOP and element counts follow the standard per-operation expressions
/// (e.g. QKV projection prefill: `6BSH^2` FLOPs over `6BSH + 3H^2` elements);
/// element counts are scaled by `bytes_per_element` to produce bytes.
pub fn op_cost<T: Scalar>(model: &ModelProfile, shape: BatchShape, op: OpKind) -> OpCost<T> {
    shape.assert_valid();
    let b = T::from_count(shape.batch_size);
    let s = T::from_count(shape.seq_len);
    let h = T::from_count(model.hidden_size);
    let m = T::from_count(model.heads);
    let e = T::from_count(model.bytes_per_element);
    let c = |x: u64| T::from_count(x);

    let (flops, elems) = match (op, shape.phase) {
        (OpKind::QkvProjection, Phase::Prefill) => (c(6) * b * s * h * h, c(6) * b * s * h + c(3) * h * h),
        (OpKind::QkvProjection, Phase::Decode) => (c(6) * b * h * h, c(6) * b * h + c(3) * h * h),
        (OpKind::AttentionQk, Phase::Prefill) | (OpKind::AttentionAv, Phase::Prefill) => {
            (c(2) * b * s * s * h, c(2) * b * s * h + b * s * s * m)
        }
        (OpKind::AttentionQk, Phase::Decode) | (OpKind::AttentionAv, Phase::Decode) => {
            (c(2) * b * s * h, c(2) * b * s * m + b * h * (s + T::one()))
        }
        (OpKind::OutputProjection, Phase::Prefill) => (c(2) * b * s * h * h, c(2) * b * s * h + h * h),
        (OpKind::OutputProjection, Phase::Decode) => (c(2) * b * h * h, c(2) * b * h + h * h),
        (OpKind::DimExpansion, Phase::Prefill) | (OpKind::DimReduction, Phase::Prefill) => {
            (c(8) * b * s * h * h, c(2) * b * s * h + c(4) * h * h)
        }
        (OpKind::DimExpansion, Phase::Decode) | (OpKind::DimReduction, Phase::Decode) => {
            (c(8) * b * h * h, c(2) * b * h + c(4) * h * h)
        }
    };
    OpCost { flops, bytes: elems * e }
}

/// Arithmetic intensity (FLOP/byte) of `op` at the given shape.
pub fn arithmetic_intensity<T: Scalar>(model: &ModelProfile, shape: BatchShape, op: OpKind) -> T {
    let cost = op_cost::<T>(model, shape, op);
    cost.flops / cost.bytes
}

/// Theoretical KV-transfer bandwidth (bytes/s) a fully disaggregated cluster
/// needs to sustain a given prefill token rate.
pub fn required_kv_bandwidth<T: Scalar>(model: &ModelProfile, prefill_token_rate: T) -> T {
    assert!(prefill_token_rate >= T::zero(), "rate must be >= 0");
    prefill_token_rate * T::from_count(model.kv_bytes_per_token())
}

fn roofline_term<T: Scalar>(cfg: &InstanceConfig<T>, flops: T, bytes: T) -> T {
    let compute = flops / cfg.effective_flops();
    let memory = bytes / cfg.effective_bandwidth();
    compute.max(memory)
}

/// Duration of one prefill batch over `total_tokens` prompt tokens.
///
/// The batch is costed as a single sequence of `total_tokens` (the profiling
/// key used for admission prediction), summing per-operation roofline terms
/// over all layers and applying the tensor-parallel communication surcharge.
/// Monotone nondecreasing in `total_tokens`.
pub fn prefill_time<T: Scalar>(cfg: &InstanceConfig<T>, total_tokens: u64) -> T {
    assert!(total_tokens >= 1, "total_tokens must be >= 1");
    let shape = BatchShape::prefill(1, total_tokens);
    let mut per_layer = cfg.per_layer_overhead;
    for op in OpKind::ALL {
        let cost = op_cost::<T>(&cfg.model, shape, op);
        per_layer = per_layer + roofline_term(cfg, cost.flops, cost.bytes);
    }
    per_layer * T::from_count(cfg.model.layer_num) * (T::one() + cfg.comm_overhead_fraction)
}

/// Table of per-layer weight bytes by operation, as twelfths of the per-layer
/// weight footprint (3 H^2 : H^2 : 4 H^2 : 4 H^2 across the four projections).
fn weight_share(op: OpKind) -> u64 {
    match op {
        OpKind::QkvProjection => 3,
        OpKind::OutputProjection => 1,
        OpKind::DimExpansion | OpKind::DimReduction => 4,
        OpKind::AttentionQk | OpKind::AttentionAv => 0,
    }
}

struct DecodeSide<T> {
    batch: u64,
    kv_tokens: u64,
    mean_kv: T,
}

/// Per-op decode contribution: (flops, activation bytes, kv bytes).
fn decode_op_parts<T: Scalar>(
    model: &ModelProfile,
    side: &DecodeSide<T>,
    op: OpKind,
) -> (T, T, T) {
    let b = T::from_count(side.batch);
    let h = T::from_count(model.hidden_size);
    let m = T::from_count(model.heads);
    let e = T::from_count(model.bytes_per_element);
    let kv = T::from_count(side.kv_tokens);
    let c = |x: u64| T::from_count(x);
    // Half of kv_bytes_per_token is keys (read by QK^T), half is values.
    let kv_half = kv * T::from_count(model.kv_bytes_per_token())
        / (c(2) * T::from_count(model.layer_num));
    match op {
        OpKind::QkvProjection => (c(6) * b * h * h, c(6) * b * h * e, T::zero()),
        OpKind::AttentionQk | OpKind::AttentionAv => {
            // 2BSH flops with S the mean KV length collapses to 2*kv_tokens*H.
            let flops = c(2) * kv * h;
            let act = (c(2) * b * side.mean_kv * m + b * h) * e;
            (flops, act, kv_half)
        }
        OpKind::OutputProjection => (c(2) * b * h * h, c(2) * b * h * e, T::zero()),
        OpKind::DimExpansion | OpKind::DimReduction => (c(8) * b * h * h, c(2) * b * h * e, T::zero()),
    }
}

/// Duration of one decode iteration for `batch_size` requests holding
/// `total_kv_tokens` of context in aggregate.
///
/// Each operation pays the roofline maximum of its compute term and its
/// memory term; memory includes the operation's share of the full weight
/// footprint (weights are re-read every iteration under separate batching),
/// the KV-cache load for the attention products, and activation traffic. For
/// small batches the weight- and KV-load terms dominate, making the iteration
/// memory-bound; the result is strictly increasing in `total_kv_tokens`.
pub fn decode_step_time<T: Scalar>(
    cfg: &InstanceConfig<T>,
    batch_size: u64,
    total_kv_tokens: u64,
) -> T {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    assert!(
        total_kv_tokens >= batch_size,
        "total_kv_tokens must be >= batch_size (every request holds context)"
    );
    let side = DecodeSide {
        batch: batch_size,
        kv_tokens: total_kv_tokens,
        mean_kv: T::from_count(total_kv_tokens) / T::from_count(batch_size),
    };
    step_time(cfg, Some(&side), &[])
}

/// One prefill chunk inside a hybrid iteration: `tokens` new prompt tokens
/// attending over `context` tokens already prefilled (and re-read).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkWork {
    pub tokens: u64,
    pub context: u64,
}

/// Duration of one hybrid-batching iteration carrying `decode_batch` decode
/// tokens plus the given prefill chunks.
///
/// Chunk attention attends over `context + tokens` positions and re-reads the
/// `context` tokens of prompt KV written by earlier chunks, which is the
/// repeated-access overhead of chunked prefill. Weights are charged once per
/// iteration regardless of composition.
pub fn hybrid_step_time<T: Scalar>(
    cfg: &InstanceConfig<T>,
    decode_batch: u64,
    decode_kv_tokens: u64,
    chunks: &[ChunkWork],
) -> T {
    assert!(
        decode_batch > 0 || !chunks.is_empty(),
        "hybrid iteration must carry decode tokens or prefill chunks"
    );
    let side = if decode_batch > 0 {
        assert!(decode_kv_tokens >= decode_batch);
        Some(DecodeSide {
            batch: decode_batch,
            kv_tokens: decode_kv_tokens,
            mean_kv: T::from_count(decode_kv_tokens) / T::from_count(decode_batch),
        })
    } else {
        None
    };
    step_time(cfg, side.as_ref(), chunks)
}

/// Shared roofline evaluation for decode and hybrid iterations.
fn step_time<T: Scalar>(
    cfg: &InstanceConfig<T>,
    decode: Option<&DecodeSide<T>>,
    chunks: &[ChunkWork],
) -> T {
    let model = &cfg.model;
    let layers = T::from_count(model.layer_num);
    let e = T::from_count(model.bytes_per_element);
    let h = T::from_count(model.hidden_size);
    let m = T::from_count(model.heads);
    let c = |x: u64| T::from_count(x);
    let weights_per_layer = T::from_count(model.weights_bytes) / layers;
    let kv_per_token_layer = T::from_count(model.kv_bytes_per_token()) / layers;

    let mut per_layer = cfg.per_layer_overhead;
    for op in OpKind::ALL {
        let (mut flops, mut mem) = (T::zero(), T::zero());
        if let Some(side) = decode {
            let (f, act, kv) = decode_op_parts(model, side, op);
            flops = flops + f;
            mem = mem + act + kv;
        }
        for chunk in chunks {
            let t = c(chunk.tokens);
            let ctx = c(chunk.context + chunk.tokens);
            match op {
                OpKind::QkvProjection => {
                    flops = flops + c(6) * t * h * h;
                    mem = mem + c(6) * t * h * e;
                }
                OpKind::AttentionQk | OpKind::AttentionAv => {
                    flops = flops + c(2) * t * ctx * h;
                    // Score traffic plus re-read of the prompt KV written so far.
                    mem = mem + (c(2) * t * h + t * ctx * m) * e
                        + c(chunk.context) * kv_per_token_layer / c(2);
                }
                OpKind::OutputProjection => {
                    flops = flops + c(2) * t * h * h;
                    mem = mem + c(2) * t * h * e;
                }
                OpKind::DimExpansion | OpKind::DimReduction => {
                    flops = flops + c(8) * t * h * h;
                    mem = mem + c(2) * t * h * e;
                }
            }
        }
        mem = mem + weights_per_layer * T::from_count(weight_share(op)) / c(12);
        per_layer = per_layer + roofline_term(cfg, flops, mem);
    }
    per_layer * layers * (T::one() + cfg.comm_overhead_fraction)
}
