//! The registration network.
//!
//! A dual-stream pyramid encoder extracts features of the moving and fixed
//! volumes at full, 1/2, 1/4 and 1/8 resolution with C, 2C, 4C, 8C channels.
//! The deepest features of both streams are concatenated, flattened to
//! tokens, projected into the transformer width by `adapter0`, summed with a
//! learnable position embedding, and run through two frozen transformer
//! stacks (pre-RMSNorm, rotary multi-head attention, SwiGLU) joined by a
//! trainable inner adapter. Per decoder stage `i`, `adapter_i` projects the
//! token output to `2^(2(i+1))*C` channels which a voxel shuffle reshapes
//! onto the stage grid. Decoder stages run coarse to fine: stage 1 (1/8)
//! fuses features only, stages 2..4 emit displacement fields that are
//! upscaled and composed into the full-resolution warp, with the running
//! field and the correspondingly warped moving image fed back into the
//! fusion of stages 3 and 4.
//!
//! Cascade refinement repeats the decoder with fresh per-step adapters and
//! stages; every step shares the encoder pyramid, the bottleneck output and
//! the trunk adapters, receives the previous step's fusion features as extra
//! stage inputs, and composes its field onto the running total.
//!
//! Field heads are zero-initialized, so an untrained model is exactly the
//! identity transform.

pub mod params;

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, DiffValue, Graph};
use crate::volume::{
    resample_volume, DisplacementField, ResampleMode, ScalarVolume, VolumeError, VolumeGeometry,
};
use params::{Init, ParamGroup, ParamId, ParamStore};

pub const LEVELS: usize = 4;
const RMS_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const CAUSAL_NEG: f32 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("geometry mismatch: model expects dims {expected:?}, got {got:?}")]
    Geometry {
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("cascade step {requested} not available: model has {built} step decoders, {trained} trained")]
    StepOutOfRange {
        requested: usize,
        built: usize,
        trained: usize,
    },
    #[error("unknown phase: {0}")]
    UnknownPhase(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottleneckMode {
    /// Stacks hold deterministically seeded weights and stay frozen.
    FrozenSeeded,
    /// Same architecture, stacks train with everything else.
    Trainable,
    /// Plain attention: no rotary phases, no causal mask, trainable.
    StandardAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Grid the model is built for, `(nx, ny, nz)`; each divisible by 8.
    pub input_dims: [usize; 3],
    /// Encoder channel base C.
    pub base_channels: usize,
    /// Transformer width (stand-in for the 4096 of the full-size model).
    pub d_model: usize,
    pub heads: usize,
    /// Layers per transformer stack (two stacks total).
    pub stack_depth: usize,
    /// Width multiple of the inner adapter's hidden layer.
    pub inner_multiple: usize,
    pub causal_mask: bool,
    pub use_pos_embed: bool,
    pub bottleneck_mode: BottleneckMode,
    /// Number of cascade step decoders built.
    pub cascade_steps: usize,
    /// Resolution levels; fixed at 4.
    pub levels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dims: [32, 32, 32],
            base_channels: 8,
            d_model: 256,
            heads: 4,
            stack_depth: 2,
            inner_multiple: 2,
            causal_mask: true,
            use_pos_embed: true,
            bottleneck_mode: BottleneckMode::FrozenSeeded,
            cascade_steps: 3,
            levels: LEVELS,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.levels != LEVELS {
            return Err(format!("model.levels is fixed at {LEVELS}, got {}", self.levels));
        }
        let g = self.geometry();
        if !g.divisible_by(8) || self.input_dims.contains(&0) {
            return Err(format!(
                "model.input_dims: each dimension must be divisible by 8, got {:?}",
                self.input_dims
            ));
        }
        if self.base_channels == 0 {
            return Err("model.base_channels must be >= 1".into());
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % (2 * self.heads) != 0 {
            return Err(format!(
                "model.d_model ({}) must be divisible by 2*heads ({})",
                self.d_model,
                2 * self.heads
            ));
        }
        if self.stack_depth == 0 {
            return Err("model.stack_depth must be >= 1".into());
        }
        if self.inner_multiple == 0 {
            return Err("model.inner_multiple must be >= 1".into());
        }
        if self.cascade_steps == 0 {
            return Err("model.cascade_steps must be >= 1".into());
        }
        Ok(())
    }

    pub fn geometry(&self) -> VolumeGeometry {
        VolumeGeometry::new(self.input_dims[0], self.input_dims[1], self.input_dims[2])
    }

    /// Token grid at 1/8 resolution as `[d, h, w]`.
    pub fn token_grid(&self) -> [usize; 3] {
        [
            self.input_dims[2] / 8,
            self.input_dims[1] / 8,
            self.input_dims[0] / 8,
        ]
    }

    pub fn token_count(&self) -> usize {
        self.token_grid().iter().product()
    }

    /// SwiGLU hidden width: 8/3 * d_model rounded up to a multiple of 64.
    pub fn ffn_hidden(&self) -> usize {
        let raw = (8 * self.d_model).div_ceil(3);
        raw.div_ceil(64) * 64
    }

    /// Encoder channels per level, full resolution first.
    pub fn encoder_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// `adapter_i` output width, `i` in 1..=4.
    pub fn adapter_out(&self, i: usize) -> usize {
        (1 << (2 * (i + 1))) * self.base_channels
    }

    /// Channels of the reconstructed token features at stage `i` (1..=4).
    pub fn stage_token_channels(&self, i: usize) -> usize {
        (1 << (5 - i)) * self.base_channels
    }

    /// Fusion output channels at stage `i` (1..=4).
    pub fn fusion_out(&self, i: usize) -> usize {
        (1 << (4 - i)) * self.base_channels
    }

    /// Fusion input channels at stage `i`, with or without the previous
    /// step's injected features.
    pub fn fusion_in(&self, i: usize, injected: bool) -> usize {
        let ec = self.encoder_channels();
        let up = if i >= 2 { self.fusion_out(i - 1) / 2 } else { 0 };
        let field_img = if i >= 3 { 4 } else { 0 };
        let inj = if injected { self.fusion_out(i) } else { 0 };
        field_img + 2 * ec[4 - i] + up + self.stage_token_channels(i) + inj
    }
}

/// Training phase controlling the trainable/frozen partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainPhase {
    Single,
    /// 1-based cascade step.
    CascadeStep(usize),
    Joint,
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainPhase::Single => write!(f, "single"),
            TrainPhase::CascadeStep(k) => write!(f, "cascade_step_{k}"),
            TrainPhase::Joint => write!(f, "joint"),
        }
    }
}

impl std::str::FromStr for TrainPhase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(TrainPhase::Single),
            "joint" => Ok(TrainPhase::Joint),
            other => {
                if let Some(k) = other.strip_prefix("cascade_step_") {
                    let k: usize = k
                        .parse()
                        .map_err(|_| format!("unknown phase {other:?}"))?;
                    if k == 0 {
                        return Err("cascade step phases are 1-based".into());
                    }
                    Ok(TrainPhase::CascadeStep(k))
                } else {
                    Err(format!(
                        "unknown phase {other:?} (expected single, joint, or cascade_step_<k>)"
                    ))
                }
            }
        }
    }
}

impl Serialize for TrainPhase {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for TrainPhase {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---- parameter-holding blocks ----

#[derive(Debug, Clone)]
struct ConvParams {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Debug, Clone)]
struct TConvParams {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct LinearParams {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone)]
struct EncoderStream {
    convs: Vec<ConvParams>,
}

#[derive(Debug, Clone)]
struct LlamaLayer {
    norm1: ParamId,
    wq: LinearParams,
    wk: LinearParams,
    wv: LinearParams,
    wo: LinearParams,
    norm2: ParamId,
    gate: LinearParams,
    up: LinearParams,
    down: LinearParams,
}

#[derive(Debug, Clone)]
struct Stack {
    layers: Vec<LlamaLayer>,
    final_norm: ParamId,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    fusion: ConvParams,
    /// Stages 2..4 emit a 3-channel field; stage 1 fuses only.
    head: Option<ConvParams>,
    /// Stages 1..3 upsample their features to the next stage.
    upsample: Option<TConvParams>,
}

#[derive(Debug, Clone)]
struct StepDecoder {
    adapters: Vec<LinearParams>,
    stages: Vec<DecoderStage>,
}

/// Trainable/frozen split for a phase.
#[derive(Debug, Clone)]
pub struct ParamPartition {
    pub trainable: Vec<ParamId>,
    pub frozen: Vec<ParamId>,
}

/// The full registration model: configuration plus parameter store.
#[derive(Debug, Clone)]
pub struct RegModel {
    pub cfg: ModelConfig,
    pub seed: u64,
    store: ParamStore,
    enc_moving: EncoderStream,
    enc_fixed: EncoderStream,
    adapter0: (LinearParams, LinearParams),
    inner: (LinearParams, LinearParams),
    pos_embed: Option<ParamId>,
    stack1: Stack,
    stack2: Stack,
    steps: Vec<StepDecoder>,
    /// Cascade steps trained so far; inference runs this many decoders.
    pub trained_steps: usize,
    /// Cumulative optimizer steps across all phases (trace numbering).
    pub completed_steps: usize,
}

fn linear_params(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    n_in: usize,
    n_out: usize,
    bias: bool,
    zero_init: bool,
    seed: u64,
) -> LinearParams {
    let init = if zero_init { Init::Zeros } else { Init::FanIn(n_in) };
    let w = store.add(format!("{name}.w"), vec![n_out, n_in], group, init, seed);
    let b = bias.then(|| {
        store.add(
            format!("{name}.b"),
            vec![n_out],
            group,
            if zero_init { Init::Zeros } else { Init::FanIn(n_in) },
            seed,
        )
    });
    LinearParams { w, b }
}

fn conv_params(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    c_in: usize,
    c_out: usize,
    stride: usize,
    zero_init: bool,
    seed: u64,
) -> ConvParams {
    let init = if zero_init {
        Init::Zeros
    } else {
        Init::HeUniform(27 * c_in)
    };
    let w = store.add(
        format!("{name}.w"),
        vec![c_out, c_in, 3, 3, 3],
        group,
        init,
        seed,
    );
    let b = store.add(
        format!("{name}.b"),
        vec![c_out],
        group,
        if zero_init { Init::Zeros } else { Init::FanIn(27 * c_in) },
        seed,
    );
    ConvParams { w, b, stride }
}

fn tconv_params(
    store: &mut ParamStore,
    name: &str,
    group: ParamGroup,
    c_in: usize,
    c_out: usize,
    seed: u64,
) -> TConvParams {
    let w = store.add(
        format!("{name}.w"),
        vec![c_in, c_out, 2, 2, 2],
        group,
        Init::HeUniform(8 * c_in),
        seed,
    );
    let b = store.add(
        format!("{name}.b"),
        vec![c_out],
        group,
        Init::FanIn(8 * c_in),
        seed,
    );
    TConvParams { w, b }
}

fn encoder_stream(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, seed: u64) -> EncoderStream {
    let ec = cfg.encoder_channels();
    let mut convs = Vec::with_capacity(LEVELS);
    convs.push(conv_params(
        store,
        &format!("{prefix}.conv1"),
        ParamGroup::Encoder,
        1,
        ec[0],
        1,
        false,
        seed,
    ));
    for l in 1..LEVELS {
        convs.push(conv_params(
            store,
            &format!("{prefix}.conv{}", l + 1),
            ParamGroup::Encoder,
            ec[l - 1],
            ec[l],
            2,
            false,
            seed,
        ));
    }
    EncoderStream { convs }
}

fn build_stack(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, seed: u64) -> Stack {
    let d = cfg.d_model;
    let hidden = cfg.ffn_hidden();
    let layers = (0..cfg.stack_depth)
        .map(|l| {
            let p = format!("{prefix}.layer{l}");
            LlamaLayer {
                norm1: store.add(
                    format!("{p}.norm1.g"),
                    vec![d],
                    ParamGroup::Bottleneck,
                    Init::Ones,
                    seed,
                ),
                wq: linear_params(store, &format!("{p}.wq"), ParamGroup::Bottleneck, d, d, false, false, seed),
                wk: linear_params(store, &format!("{p}.wk"), ParamGroup::Bottleneck, d, d, false, false, seed),
                wv: linear_params(store, &format!("{p}.wv"), ParamGroup::Bottleneck, d, d, false, false, seed),
                wo: linear_params(store, &format!("{p}.wo"), ParamGroup::Bottleneck, d, d, false, false, seed),
                norm2: store.add(
                    format!("{p}.norm2.g"),
                    vec![d],
                    ParamGroup::Bottleneck,
                    Init::Ones,
                    seed,
                ),
                gate: linear_params(store, &format!("{p}.gate"), ParamGroup::Bottleneck, d, hidden, false, false, seed),
                up: linear_params(store, &format!("{p}.up"), ParamGroup::Bottleneck, d, hidden, false, false, seed),
                down: linear_params(store, &format!("{p}.down"), ParamGroup::Bottleneck, hidden, d, false, false, seed),
            }
        })
        .collect();
    Stack {
        layers,
        final_norm: store.add(
            format!("{prefix}.final_norm.g"),
            vec![cfg.d_model],
            ParamGroup::Bottleneck,
            Init::Ones,
            seed,
        ),
    }
}

fn build_step(store: &mut ParamStore, k: usize, cfg: &ModelConfig, seed: u64) -> StepDecoder {
    let injected = k > 0;
    let adapters = (1..=LEVELS)
        .map(|i| {
            let a = linear_params(
                store,
                &format!("step{k}.adapter{i}"),
                ParamGroup::StepAdapters(k),
                cfg.d_model,
                cfg.adapter_out(i),
                true,
                true, // zero-init: the frozen-bottleneck branch fades in
                seed,
            );
            // dimension contract: 2^(2(i+1)) * C
            assert_eq!(
                store.entry(a.w).shape[0],
                (1 << (2 * (i + 1))) * cfg.base_channels
            );
            a
        })
        .collect();
    let stages = (1..=LEVELS)
        .map(|i| {
            let p = format!("step{k}.stage{i}");
            let fusion = conv_params(
                store,
                &format!("{p}.fusion"),
                ParamGroup::StepDecoder(k),
                cfg.fusion_in(i, injected),
                cfg.fusion_out(i),
                1,
                false,
                seed,
            );
            let head = (i >= 2).then(|| {
                conv_params(
                    store,
                    &format!("{p}.head"),
                    ParamGroup::StepDecoder(k),
                    cfg.fusion_out(i),
                    3,
                    1,
                    true, // zero-init: the untrained model is the identity transform
                    seed,
                )
            });
            let upsample = (i <= 3).then(|| {
                tconv_params(
                    store,
                    &format!("{p}.up"),
                    ParamGroup::StepDecoder(k),
                    cfg.fusion_out(i),
                    cfg.fusion_out(i) / 2,
                    seed,
                )
            });
            DecoderStage {
                fusion,
                head,
                upsample,
            }
        })
        .collect();
    StepDecoder { adapters, stages }
}

/// Lazily binds store parameters into a graph with per-parameter
/// trainability.
struct Ctx<'a> {
    g: &'a mut Graph<f32>,
    store: &'a ParamStore,
    mask: &'a [bool],
    bound: Vec<Option<DiffValue>>,
}

impl<'a> Ctx<'a> {
    fn new(g: &'a mut Graph<f32>, store: &'a ParamStore, mask: &'a [bool]) -> Self {
        let bound = vec![None; store.len()];
        Self {
            g,
            store,
            mask,
            bound,
        }
    }

    fn p(&mut self, id: ParamId) -> Result<DiffValue, ModelError> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let e = self.store.entry(id);
        let v = self.g.leaf(&e.shape, e.data.clone(), self.mask[id.0])?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    fn linear(&mut self, x: DiffValue, p: &LinearParams) -> Result<DiffValue, ModelError> {
        let w = self.p(p.w)?;
        let b = match p.b {
            Some(b) => Some(self.p(b)?),
            None => None,
        };
        Ok(self.g.linear(x, w, b)?)
    }

    fn conv(&mut self, x: DiffValue, p: &ConvParams) -> Result<DiffValue, ModelError> {
        let w = self.p(p.w)?;
        let b = self.p(p.b)?;
        Ok(self.g.conv3d(x, w, b, p.stride)?)
    }

    fn conv_block(&mut self, x: DiffValue, p: &ConvParams) -> Result<DiffValue, ModelError> {
        let y = self.conv(x, p)?;
        Ok(self.g.leaky_relu(y, LEAKY_SLOPE)?)
    }

    fn tconv_block(&mut self, x: DiffValue, p: &TConvParams) -> Result<DiffValue, ModelError> {
        let w = self.p(p.w)?;
        let b = self.p(p.b)?;
        let y = self.g.conv_transposed3d(x, w, b)?;
        Ok(self.g.leaky_relu(y, LEAKY_SLOPE)?)
    }

    /// `second + first(x + second)`: warping by the result equals warping by
    /// `first` then refining by `second`.
    fn compose(&mut self, first: DiffValue, second: DiffValue) -> Result<DiffValue, ModelError> {
        let pulled = self.g.gather_trilinear(first, second)?;
        Ok(self.g.add(second, pulled)?)
    }

    /// Spatial 2x upscale of a field with voxel-unit rescale.
    fn upscale_field(&mut self, phi: DiffValue) -> Result<DiffValue, ModelError> {
        let up = self.g.upsample2x(phi)?;
        Ok(self.g.scale(up, 2.0)?)
    }

    /// Spatial 1/2 downscale of a field with voxel-unit rescale.
    fn downscale_field(&mut self, phi: DiffValue) -> Result<DiffValue, ModelError> {
        let down = self.g.downsample2x(phi)?;
        Ok(self.g.scale(down, 0.5)?)
    }
}

/// Per-step forward artifacts.
pub struct StepTrace {
    /// Reconstructed token features per stage (adapter + voxel shuffle).
    pub token_features: [DiffValue; 4],
    /// Activated fusion outputs of stages 1..4, injected into the next step.
    pub features: [DiffValue; 4],
    /// Stage fields emitted at 1/4, 1/2 and full resolution.
    pub stage_fields: Vec<DiffValue>,
    /// Running total after this step, full resolution `[3, d, h, w]`.
    pub phi_total: DiffValue,
}

/// Result of a cascaded forward pass.
pub struct ForwardOutput {
    /// Bottleneck token output `[tokens, d_model]`.
    pub tokens: DiffValue,
    pub steps: Vec<StepTrace>,
    /// Final full-resolution field.
    pub phi: DiffValue,
    /// Graph leaf per bound parameter (by `ParamId` index).
    pub bound: Vec<Option<DiffValue>>,
}

impl RegModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate().map_err(ModelError::Config)?;
        let mut store = ParamStore::new();
        let enc_moving = encoder_stream(&mut store, "enc.m", &cfg, seed);
        let enc_fixed = encoder_stream(&mut store, "enc.f", &cfg, seed);
        let c16 = 16 * cfg.base_channels;
        let adapter0 = (
            linear_params(&mut store, "adapter0.l1", ParamGroup::Adapter0, c16, cfg.d_model / 2, true, false, seed),
            linear_params(&mut store, "adapter0.l2", ParamGroup::Adapter0, cfg.d_model / 2, cfg.d_model, true, false, seed),
        );
        let inner = (
            linear_params(&mut store, "inner.l1", ParamGroup::InnerAdapter, cfg.d_model, cfg.inner_multiple * cfg.d_model, true, false, seed),
            linear_params(&mut store, "inner.l2", ParamGroup::InnerAdapter, cfg.inner_multiple * cfg.d_model, cfg.d_model, true, false, seed),
        );
        let pos_embed = cfg.use_pos_embed.then(|| {
            store.add(
                "pos_embed",
                vec![cfg.token_count(), cfg.d_model],
                ParamGroup::PosEmbed,
                Init::FanIn(cfg.d_model),
                seed,
            )
        });
        let stack1 = build_stack(&mut store, "stack1", &cfg, seed);
        let stack2 = build_stack(&mut store, "stack2", &cfg, seed);
        let steps = (0..cfg.cascade_steps)
            .map(|k| build_step(&mut store, k, &cfg, seed))
            .collect();
        Ok(Self {
            cfg,
            seed,
            store,
            enc_moving,
            enc_fixed,
            adapter0,
            inner,
            pos_embed,
            stack1,
            stack2,
            steps,
            trained_steps: 0,
            completed_steps: 0,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Bitwise hash of the bottleneck stack parameters.
    pub fn bottleneck_hash(&self) -> u64 {
        self.store
            .hash_params(|g| matches!(g, ParamGroup::Bottleneck))
    }

    fn group_trainable(&self, group: &ParamGroup, phase: TrainPhase) -> bool {
        let first_phase = matches!(phase, TrainPhase::Single | TrainPhase::CascadeStep(1));
        match group {
            ParamGroup::Bottleneck => {
                !matches!(self.cfg.bottleneck_mode, BottleneckMode::FrozenSeeded) && first_phase
            }
            ParamGroup::Encoder => first_phase,
            ParamGroup::Adapter0 | ParamGroup::InnerAdapter | ParamGroup::PosEmbed => {
                first_phase || phase == TrainPhase::Joint
            }
            ParamGroup::StepAdapters(k) | ParamGroup::StepDecoder(k) => match phase {
                TrainPhase::Single => *k == 0,
                TrainPhase::CascadeStep(s) => *k == s - 1,
                TrainPhase::Joint => true,
            },
        }
    }

    pub fn validate_phase(&self, phase: TrainPhase) -> Result<(), ModelError> {
        if let TrainPhase::CascadeStep(k) = phase {
            if k == 0 || k > self.cfg.cascade_steps {
                return Err(ModelError::UnknownPhase(format!(
                    "cascade_step_{k} with {} built steps",
                    self.cfg.cascade_steps
                )));
            }
        }
        Ok(())
    }

    /// Trainable/frozen partition for a phase.
    pub fn parameter_groups(&self, phase: TrainPhase) -> Result<ParamPartition, ModelError> {
        self.validate_phase(phase)?;
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        for (id, e) in self.store.iter() {
            if self.group_trainable(&e.group, phase) {
                trainable.push(id);
            } else {
                frozen.push(id);
            }
        }
        Ok(ParamPartition { trainable, frozen })
    }

    pub fn trainable_mask(&self, phase: TrainPhase) -> Result<Vec<bool>, ModelError> {
        self.validate_phase(phase)?;
        Ok(self
            .store
            .iter()
            .map(|(_, e)| self.group_trainable(&e.group, phase))
            .collect())
    }

    /// All-frozen mask for inference.
    pub fn inference_mask(&self) -> Vec<bool> {
        vec![false; self.store.len()]
    }

    fn check_geometry(&self, v: &ScalarVolume) -> Result<(), ModelError> {
        let g = v.geometry;
        let got = [g.nx, g.ny, g.nz];
        if got != self.cfg.input_dims {
            return Err(ModelError::Geometry {
                expected: self.cfg.input_dims,
                got,
            });
        }
        Ok(())
    }

    /// Standardize a volume to zero mean / unit variance for the network
    /// inputs. The loss always sees the raw intensities; this only sets the
    /// feature scale inside the encoder and decoder.
    fn standardize(v: &ScalarVolume) -> Vec<f32> {
        let n = v.data.len() as f64;
        let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = v
            .data
            .iter()
            .map(|&x| {
                let d = x as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        let inv = 1.0 / (var.sqrt() + 1e-6);
        v.data
            .iter()
            .map(|&x| ((x as f64 - mean) * inv) as f32)
            .collect()
    }

    fn encode_stream(
        &self,
        ctx: &mut Ctx,
        stream: &EncoderStream,
        img: DiffValue,
    ) -> Result<[DiffValue; 4], ModelError> {
        let f1 = ctx.conv_block(img, &stream.convs[0])?;
        let f2 = ctx.conv_block(f1, &stream.convs[1])?;
        let f3 = ctx.conv_block(f2, &stream.convs[2])?;
        let f4 = ctx.conv_block(f3, &stream.convs[3])?;
        Ok([f1, f2, f3, f4])
    }

    fn attention(
        &self,
        ctx: &mut Ctx,
        x: DiffValue,
        layer: &LlamaLayer,
        mask: Option<DiffValue>,
    ) -> Result<DiffValue, ModelError> {
        let t = ctx.g.shape(x)[0];
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let rotary = !matches!(self.cfg.bottleneck_mode, BottleneckMode::StandardAttention);
        let q = ctx.linear(x, &layer.wq)?;
        let k = ctx.linear(x, &layer.wk)?;
        let v = ctx.linear(x, &layer.wv)?;
        let _ = t;
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut qh = ctx.g.slice_cols(q, h * dh, dh)?;
            let mut kh = ctx.g.slice_cols(k, h * dh, dh)?;
            let vh = ctx.g.slice_cols(v, h * dh, dh)?;
            if rotary {
                qh = ctx.g.rotary_embed(qh)?;
                kh = ctx.g.rotary_embed(kh)?;
            }
            let kt = ctx.g.transpose2d(kh)?;
            let mut scores = ctx.g.matmul(qh, kt)?;
            scores = ctx.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                scores = ctx.g.add(scores, m)?;
            }
            let attn = ctx.g.softmax(scores, 1)?;
            head_outputs.push(ctx.g.matmul(attn, vh)?);
        }
        let cat = ctx.g.concat(&head_outputs, 1)?;
        ctx.linear(cat, &layer.wo)
    }

    fn stack_forward(
        &self,
        ctx: &mut Ctx,
        stack: &Stack,
        mut x: DiffValue,
        mask: Option<DiffValue>,
    ) -> Result<DiffValue, ModelError> {
        for layer in &stack.layers {
            let n1 = ctx.g.rms_norm(x, RMS_EPS)?;
            let g1 = ctx.p(layer.norm1)?;
            let h = ctx.g.scale_cols(n1, g1)?;
            let attn = self.attention(ctx, h, layer, mask)?;
            x = ctx.g.add(x, attn)?;
            let n2 = ctx.g.rms_norm(x, RMS_EPS)?;
            let g2 = ctx.p(layer.norm2)?;
            let h2 = ctx.g.scale_cols(n2, g2)?;
            let gate = ctx.linear(h2, &layer.gate)?;
            let gate = ctx.g.silu(gate)?;
            let up = ctx.linear(h2, &layer.up)?;
            let prod = ctx.g.mul(gate, up)?;
            let ffn = ctx.linear(prod, &layer.down)?;
            x = ctx.g.add(x, ffn)?;
        }
        let n = ctx.g.rms_norm(x, RMS_EPS)?;
        let g = ctx.p(stack.final_norm)?;
        Ok(ctx.g.scale_cols(n, g)?)
    }

    /// Deep features through adapters and the transformer bottleneck.
    fn llama_block(
        &self,
        ctx: &mut Ctx,
        fm4: DiffValue,
        ff4: DiffValue,
    ) -> Result<DiffValue, ModelError> {
        let cat = ctx.g.concat(&[fm4, ff4], 0)?;
        let mut tokens = ctx.g.vol_to_tokens(cat)?;
        if ctx.g.shape(tokens)[0] != self.cfg.token_count() {
            return Err(ModelError::Config(format!(
                "token count {} does not match position embedding {}",
                ctx.g.shape(tokens)[0],
                self.cfg.token_count()
            )));
        }
        tokens = ctx.linear(tokens, &self.adapter0.0)?;
        tokens = ctx.linear(tokens, &self.adapter0.1)?;
        if let Some(pos) = self.pos_embed {
            let p = ctx.p(pos)?;
            tokens = ctx.g.add(tokens, p)?;
        }
        let mask = self.causal_mask_const(ctx)?;
        tokens = self.stack_forward(ctx, &self.stack1, tokens, mask)?;
        // inner adapter: expansion MLP between the two stacks
        let hidden = ctx.linear(tokens, &self.inner.0)?;
        let hidden = ctx.g.silu(hidden)?;
        tokens = ctx.linear(hidden, &self.inner.1)?;
        self.stack_forward(ctx, &self.stack2, tokens, mask)
    }

    fn causal_mask_const(&self, ctx: &mut Ctx) -> Result<Option<DiffValue>, ModelError> {
        let causal = self.cfg.causal_mask
            && !matches!(self.cfg.bottleneck_mode, BottleneckMode::StandardAttention);
        if !causal {
            return Ok(None);
        }
        let t = self.cfg.token_count();
        let mut data = vec![0.0f32; t * t];
        for i in 0..t {
            for j in i + 1..t {
                data[i * t + j] = CAUSAL_NEG;
            }
        }
        Ok(Some(ctx.g.constant(&[t, t], data)?))
    }

    /// Project tokens with `adapter_i` and voxel-shuffle onto the stage grid.
    fn reconstruct_stage(
        &self,
        ctx: &mut Ctx,
        tokens: DiffValue,
        step: usize,
        i: usize,
    ) -> Result<DiffValue, ModelError> {
        let proj = ctx.linear(tokens, &self.steps[step].adapters[i - 1])?;
        let grid = self.cfg.token_grid();
        let vol = ctx.g.tokens_to_vol(proj, grid)?;
        Ok(ctx.g.voxel_shuffle(vol, 1 << (i - 1))?)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode_step(
        &self,
        ctx: &mut Ctx,
        k: usize,
        enc_m: &[DiffValue; 4],
        enc_f: &[DiffValue; 4],
        tokens: DiffValue,
        m_full: DiffValue,
        m_half: DiffValue,
        base: Option<DiffValue>,
        prev: Option<&StepTrace>,
    ) -> Result<StepTrace, ModelError> {
        let step = &self.steps[k];
        let ft: Vec<DiffValue> = (1..=4)
            .map(|i| self.reconstruct_stage(ctx, tokens, k, i))
            .collect::<Result<_, _>>()?;

        // S1 at 1/8: feature fusion only
        let mut s1_in = vec![enc_m[3], enc_f[3], ft[0]];
        if let Some(p) = prev {
            s1_in.push(p.features[0]);
        }
        let cat1 = ctx.g.concat(&s1_in, 0)?;
        let f4 = ctx.conv_block(cat1, &step.stages[0].fusion)?;
        let up4 = ctx.tconv_block(f4, step.stages[0].upsample.as_ref().unwrap())?;

        // S2 at 1/4: first stage field
        let mut s2_in = vec![enc_m[2], enc_f[2], up4, ft[1]];
        if let Some(p) = prev {
            s2_in.push(p.features[1]);
        }
        let cat2 = ctx.g.concat(&s2_in, 0)?;
        let f3 = ctx.conv_block(cat2, &step.stages[1].fusion)?;
        let delta2 = ctx.conv(f3, step.stages[1].head.as_ref().unwrap())?;
        let up3 = ctx.tconv_block(f3, step.stages[1].upsample.as_ref().unwrap())?;
        let mut running = delta2; // in-step field chain at 1/4

        // S3 at 1/2: running field and warped half-res moving image join in
        let r_up = ctx.upscale_field(running)?;
        let total_half = match base {
            Some(b) => {
                let b_half = ctx.downscale_field(b)?;
                ctx.compose(b_half, r_up)?
            }
            None => r_up,
        };
        let warped_half = ctx.g.gather_trilinear(m_half, total_half)?;
        let mut s3_in = vec![total_half, warped_half, enc_m[1], enc_f[1], up3, ft[2]];
        if let Some(p) = prev {
            s3_in.push(p.features[2]);
        }
        let cat3 = ctx.g.concat(&s3_in, 0)?;
        let f2 = ctx.conv_block(cat3, &step.stages[2].fusion)?;
        let delta3 = ctx.conv(f2, step.stages[2].head.as_ref().unwrap())?;
        running = ctx.compose(r_up, delta3)?;
        let up2 = ctx.tconv_block(f2, step.stages[2].upsample.as_ref().unwrap())?;

        // S4 at full resolution
        let r_up = ctx.upscale_field(running)?;
        let total_full = match base {
            Some(b) => ctx.compose(b, r_up)?,
            None => r_up,
        };
        let warped_full = ctx.g.gather_trilinear(m_full, total_full)?;
        let mut s4_in = vec![total_full, warped_full, enc_m[0], enc_f[0], up2, ft[3]];
        if let Some(p) = prev {
            s4_in.push(p.features[3]);
        }
        let cat4 = ctx.g.concat(&s4_in, 0)?;
        let f1 = ctx.conv_block(cat4, &step.stages[3].fusion)?;
        let delta4 = ctx.conv(f1, step.stages[3].head.as_ref().unwrap())?;
        let phi_step = ctx.compose(r_up, delta4)?;
        let phi_total = match base {
            Some(b) => ctx.compose(b, phi_step)?,
            None => phi_step,
        };

        Ok(StepTrace {
            token_features: [ft[0], ft[1], ft[2], ft[3]],
            features: [f4, f3, f2, f1],
            stage_fields: vec![delta2, delta3, delta4],
            phi_total,
        })
    }

    /// Cascaded forward over decoders `1..=steps`. The encoder pyramid and
    /// bottleneck output are computed once and shared by all steps.
    pub fn forward(
        &self,
        g: &mut Graph<f32>,
        mask: &[bool],
        moving: &ScalarVolume,
        fixed: &ScalarVolume,
        steps: usize,
    ) -> Result<ForwardOutput, ModelError> {
        self.check_geometry(moving)?;
        self.check_geometry(fixed)?;
        if steps == 0 || steps > self.steps.len() {
            return Err(ModelError::StepOutOfRange {
                requested: steps,
                built: self.steps.len(),
                trained: self.trained_steps,
            });
        }
        let geom = self.cfg.geometry();
        let dims = [geom.nz, geom.ny, geom.nx];
        let mut ctx = Ctx::new(g, &self.store, mask);

        let m_std = ScalarVolume::new(geom, Self::standardize(moving)).expect("geometry checked");
        let m_full = ctx
            .g
            .constant(&[1, dims[0], dims[1], dims[2]], m_std.data.clone())?;
        let f_full = ctx
            .g
            .constant(&[1, dims[0], dims[1], dims[2]], Self::standardize(fixed))?;
        let half = geom.halved();
        let m_half_vol = resample_volume(&m_std, half, ResampleMode::Trilinear);
        let m_half = ctx
            .g
            .constant(&[1, half.nz, half.ny, half.nx], m_half_vol.data)?;

        let enc_m = self.encode_stream(&mut ctx, &self.enc_moving, m_full)?;
        let enc_f = self.encode_stream(&mut ctx, &self.enc_fixed, f_full)?;
        let tokens = self.llama_block(&mut ctx, enc_m[3], enc_f[3])?;

        let mut traces: Vec<StepTrace> = Vec::with_capacity(steps);
        for k in 0..steps {
            let base = traces.last().map(|t| t.phi_total);
            let prev = traces.last();
            let trace = self.decode_step(
                &mut ctx, k, &enc_m, &enc_f, tokens, m_full, m_half, base, prev,
            )?;
            traces.push(trace);
        }
        let phi = traces.last().unwrap().phi_total;
        Ok(ForwardOutput {
            tokens,
            steps: traces,
            phi,
            bound: ctx.bound,
        })
    }

    /// Encoder pyramids of both streams (moving first).
    pub fn encode_pair(
        &self,
        g: &mut Graph<f32>,
        moving: &ScalarVolume,
        fixed: &ScalarVolume,
    ) -> Result<([DiffValue; 4], [DiffValue; 4]), ModelError> {
        self.check_geometry(moving)?;
        self.check_geometry(fixed)?;
        let geom = self.cfg.geometry();
        let mask = self.inference_mask();
        let mut ctx = Ctx::new(g, &self.store, &mask);
        let m = ctx
            .g
            .constant(&[1, geom.nz, geom.ny, geom.nx], Self::standardize(moving))?;
        let f = ctx
            .g
            .constant(&[1, geom.nz, geom.ny, geom.nx], Self::standardize(fixed))?;
        let em = self.encode_stream(&mut ctx, &self.enc_moving, m)?;
        let ef = self.encode_stream(&mut ctx, &self.enc_fixed, f)?;
        Ok((em, ef))
    }

    /// Inference: run all trained step decoders and extract the field.
    pub fn register_pair(
        &self,
        moving: &ScalarVolume,
        fixed: &ScalarVolume,
    ) -> Result<(DisplacementField, Duration), ModelError> {
        let steps = self.trained_steps.clamp(1, self.steps.len());
        let mut g = Graph::new();
        let mask = self.inference_mask();
        let start = Instant::now();
        let out = self.forward(&mut g, &mask, moving, fixed, steps)?;
        let elapsed = start.elapsed();
        let field =
            DisplacementField::from_planar(self.cfg.geometry(), g.data(out.phi))?;
        Ok((field, elapsed))
    }
}
