//! Optimization loop, cascade training schedules, and checkpointing.
//!
//! Training iterates image pairs with batch size 1, builds a fresh graph per
//! step, backpropagates the registration loss and Adam-updates exactly the
//! parameters the active phase marks trainable. Loss traces are line-
//! oriented text (`step<TAB>loss<TAB>sim<TAB>reg`, with `reg` the raw
//! unweighted regularizer). A non-finite loss aborts with the step number.
//!
//! Checkpoint container `CKPT1`: magic bytes `"CKPT1"`, a little-endian
//! `u64` manifest length, a UTF-8 JSON manifest (model config, run seed,
//! trained/completed step counters, and per-parameter name/shape/dtype/byte
//! offset), then the raw little-endian f32 blobs in manifest order. Round
//! trips are bitwise.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diff::{DiffError, Graph};
use crate::exec;
use crate::model::{ModelConfig, ModelError, RegModel, TrainPhase};
use crate::objective;
use crate::synth::{self, SynthError};
use crate::volume::{read_volume, ScalarVolume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error("phase {phase} requires {required} trained cascade steps, model has {trained}")]
    PhaseOrder {
        phase: String,
        required: usize,
        trained: usize,
    },
    #[error("cascade schedule needs {expected} configs, got {got}")]
    ScheduleLength { expected: usize, got: usize },
    #[error("checkpoint corrupt: {0}")]
    CheckpointCorrupt(String),
    #[error("config mismatch: checkpoint holds a different model configuration ({0})")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub phase: TrainPhase,
    /// Regularization weight; populated from the loss section of a run
    /// config file rather than parsed here.
    #[serde(skip)]
    pub lambda: f64,
    pub log_every: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 500,
            seed: 7,
            phase: TrainPhase::Single,
            lambda: 0.04,
            log_every: 50,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr > 0.0) {
            return Err(format!("train.lr must be > 0, got {}", self.lr));
        }
        if self.steps == 0 {
            return Err("train.steps must be >= 1".into());
        }
        if self.lambda < 0.0 {
            return Err(format!("train.lambda must be >= 0, got {}", self.lambda));
        }
        Ok(())
    }
}

/// One moving/fixed training pair.
#[derive(Debug, Clone)]
pub struct RegPair {
    pub moving: ScalarVolume,
    pub fixed: ScalarVolume,
}

/// Load moving/fixed pairs `range` from a generated dataset directory.
pub fn load_pairs(
    dir: &Path,
    range: std::ops::Range<usize>,
) -> Result<Vec<RegPair>, TrainError> {
    let manifest = synth::read_manifest(dir)?;
    let mut out = Vec::new();
    for files in manifest
        .iter()
        .skip(range.start)
        .take(range.end.saturating_sub(range.start))
    {
        let moving = read_volume(dir.join(&files.moving))?.into_scalar()?;
        let fixed = read_volume(dir.join(&files.fixed))?.into_scalar()?;
        out.push(RegPair { moving, fixed });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub sim: f64,
    pub reg: f64,
}

pub fn trace_to_string(rows: &[TraceRow]) -> String {
    rows.iter()
        .map(|r| format!("{}\t{}\t{}\t{}\n", r.step, r.loss, r.sim, r.reg))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub trace: Vec<TraceRow>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Standard Adam with bias correction; moments per parameter id.
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: HashMap<usize, (Vec<f32>, Vec<f32>)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, key: usize, data: &mut [f32], grad: &[f32]) {
        let (m, v) = self
            .moments
            .entry(key)
            .or_insert_with(|| (vec![0.0; data.len()], vec![0.0; data.len()]));
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let lr = self.lr;
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mhat = m[i] as f64 / bc1;
            let vhat = v[i] as f64 / bc2;
            data[i] -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
        }
    }
}

fn forward_steps_for(model: &RegModel, phase: TrainPhase) -> usize {
    match phase {
        TrainPhase::Single => 1,
        TrainPhase::CascadeStep(k) => k,
        TrainPhase::Joint => model.cfg.cascade_steps,
    }
}

fn check_phase_order(model: &RegModel, phase: TrainPhase) -> Result<(), TrainError> {
    if let TrainPhase::CascadeStep(k) = phase {
        if k > 1 && model.trained_steps < k - 1 {
            return Err(TrainError::PhaseOrder {
                phase: phase.to_string(),
                required: k - 1,
                trained: model.trained_steps,
            });
        }
    }
    Ok(())
}

/// Train the phase's trainable partition; returns the loss trace. Progress
/// counters on the model advance so traces continue across resumed runs.
pub fn train(
    model: &mut RegModel,
    pairs: &[RegPair],
    cfg: &TrainConfig,
) -> Result<TrainRecord, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    model.validate_phase(cfg.phase)?;
    check_phase_order(model, cfg.phase)?;
    let was_sequential = exec::sequential();
    if cfg.deterministic {
        exec::set_sequential(true);
    }
    let result = train_inner(model, pairs, cfg);
    exec::set_sequential(was_sequential);
    result
}

fn train_inner(
    model: &mut RegModel,
    pairs: &[RegPair],
    cfg: &TrainConfig,
) -> Result<TrainRecord, TrainError> {
    let mask = model.trainable_mask(cfg.phase)?;
    let partition = model.parameter_groups(cfg.phase)?;
    let steps_to_run = forward_steps_for(model, cfg.phase);
    let mut adam = AdamState::new(cfg.lr);
    let mut trace = Vec::with_capacity(cfg.steps);
    let start_step = model.completed_steps;
    let geom = model.cfg.geometry();
    let dims = [geom.nz, geom.ny, geom.nx];

    for local in 0..cfg.steps {
        let step = start_step + local;
        let pair = &pairs[local % pairs.len()];
        let mut g: Graph<f32> = Graph::new();
        let out = model.forward(&mut g, &mask, &pair.moving, &pair.fixed, steps_to_run)?;
        let moving = g.constant(&[1, dims[0], dims[1], dims[2]], pair.moving.data.clone())?;
        let fixed = g.constant(&[1, dims[0], dims[1], dims[2]], pair.fixed.data.clone())?;
        let (total, sim, reg) =
            objective::loss_terms(&mut g, moving, fixed, out.phi, cfg.lambda)?;
        let loss_value = g.scalar_value(total) as f64;
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step,
                value: loss_value,
            });
        }
        trace.push(TraceRow {
            step,
            loss: loss_value,
            sim: g.scalar_value(sim) as f64,
            reg: g.scalar_value(reg) as f64,
        });
        g.backward(total)?;
        adam.begin_step();
        for id in &partition.trainable {
            if let Some(v) = out.bound[id.0] {
                if let Some(grad) = g.grad(v) {
                    let grad = grad.to_vec();
                    adam.update(id.0, model.store_mut().data_mut(*id), &grad);
                }
            }
        }
        model.completed_steps += 1;
    }

    let implied = forward_steps_for(model, cfg.phase);
    model.trained_steps = model.trained_steps.max(implied);
    Ok(TrainRecord {
        initial_loss: trace.first().map(|r| r.loss).unwrap_or(0.0),
        final_loss: trace.last().map(|r| r.loss).unwrap_or(0.0),
        trace,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeMode {
    StepByStep,
    Joint,
}

/// Step-by-step: one training run per cascade step, freezing everything the
/// step's phase freezes. Joint: a single run training all decoders with the
/// encoder and bottleneck frozen.
pub fn train_cascade(
    model: &mut RegModel,
    pairs: &[RegPair],
    cfg_list: &[TrainConfig],
    mode: CascadeMode,
) -> Result<Vec<TrainRecord>, TrainError> {
    match mode {
        CascadeMode::StepByStep => {
            let n = model.cfg.cascade_steps;
            if cfg_list.len() != n {
                return Err(TrainError::ScheduleLength {
                    expected: n,
                    got: cfg_list.len(),
                });
            }
            let mut records = Vec::with_capacity(n);
            for (k, base) in cfg_list.iter().enumerate() {
                let cfg = TrainConfig {
                    phase: TrainPhase::CascadeStep(k + 1),
                    ..*base
                };
                records.push(train(model, pairs, &cfg)?);
            }
            Ok(records)
        }
        CascadeMode::Joint => {
            let base = cfg_list.first().ok_or(TrainError::ScheduleLength {
                expected: 1,
                got: 0,
            })?;
            let cfg = TrainConfig {
                phase: TrainPhase::Joint,
                ..*base
            };
            Ok(vec![train(model, pairs, &cfg)?])
        }
    }
}

// ---- checkpoint container ----

pub const CKPT_MAGIC: &[u8; 5] = b"CKPT1";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestParam {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    seed: u64,
    trained_steps: usize,
    completed_steps: usize,
    params: Vec<ManifestParam>,
}

pub fn checkpoint_to_bytes(model: &RegModel) -> Vec<u8> {
    let mut params = Vec::new();
    let mut offset = 0u64;
    for (_, e) in model.store().iter() {
        params.push(ManifestParam {
            name: e.name.clone(),
            shape: e.shape.clone(),
            dtype: "f32".into(),
            offset,
        });
        offset += 4 * e.data.len() as u64;
    }
    let manifest = Manifest {
        config: model.cfg,
        seed: model.seed,
        trained_steps: model.trained_steps,
        completed_steps: model.completed_steps,
        params,
    };
    let manifest_text = serde_json::to_string(&manifest).expect("manifest serialization");
    let mut out = Vec::with_capacity(manifest_text.len() + offset as usize + 16);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(manifest_text.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest_text.as_bytes());
    for (_, e) in model.store().iter() {
        for v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<RegModel, TrainError> {
    if bytes.len() < CKPT_MAGIC.len() + 8 || &bytes[..5] != CKPT_MAGIC {
        return Err(TrainError::CheckpointCorrupt("bad magic".into()));
    }
    let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let body = &bytes[13..];
    if body.len() < mlen {
        return Err(TrainError::CheckpointCorrupt("truncated manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen])
        .map_err(|e| TrainError::CheckpointCorrupt(format!("manifest: {e}")))?;
    if let Some(expected) = expected {
        if *expected != manifest.config {
            return Err(TrainError::ConfigMismatch(format!(
                "requested {expected:?}, checkpoint {:?}",
                manifest.config
            )));
        }
    }
    let blobs = &body[mlen..];
    let mut model = RegModel::new(manifest.config, manifest.seed)?;
    for p in &manifest.params {
        let id = model.store().by_name(&p.name).ok_or_else(|| {
            TrainError::CheckpointCorrupt(format!("unknown parameter {}", p.name))
        })?;
        let entry = model.store().entry(id);
        if entry.shape != p.shape || p.dtype != "f32" {
            return Err(TrainError::CheckpointCorrupt(format!(
                "parameter {} shape/dtype mismatch",
                p.name
            )));
        }
        let n: usize = p.shape.iter().product();
        let start = p.offset as usize;
        let end = start + 4 * n;
        if end > blobs.len() {
            return Err(TrainError::CheckpointCorrupt(format!(
                "truncated blob for {}",
                p.name
            )));
        }
        let data: Vec<f32> = blobs[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *model.store_mut().data_mut(id) = data;
    }
    model.trained_steps = manifest.trained_steps;
    model.completed_steps = manifest.completed_steps;
    Ok(model)
}

pub fn save_checkpoint(model: &RegModel, path: &Path) -> Result<(), TrainError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&checkpoint_to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&ModelConfig>,
) -> Result<RegModel, TrainError> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BottleneckMode, ModelConfig};
    use crate::synth::{gen_pair, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            input_dims: [8, 8, 8],
            base_channels: 4,
            d_model: 32,
            heads: 2,
            stack_depth: 1,
            cascade_steps: 2,
            ..ModelConfig::default()
        }
    }

    fn tiny_pairs(n: usize) -> Vec<RegPair> {
        let cfg = SynthConfig {
            size: [8, 8, 8],
            count: n,
            seed: 3,
            max_disp: 1.0,
            smooth_sigma: 2.0,
            n_shapes: 2,
        };
        (0..n as u64)
            .map(|i| {
                let p = gen_pair(&cfg, i).unwrap();
                RegPair {
                    moving: p.moving,
                    fixed: p.fixed,
                }
            })
            .collect()
    }

    /// Perturb the step-1 field heads so the initial transform is not the
    /// identity and the initial loss is nonzero.
    fn perturb_heads(model: &mut RegModel, scale: f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for stage in 2..=4 {
            let name = format!("step0.stage{stage}.head.w");
            let id = model.store().by_name(&name).unwrap();
            for v in model.store_mut().data_mut(id).iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    #[test]
    fn identity_pair_training_collapses_the_loss() {
        // on an identical pair the loss is exactly the field penalty;
        // training must push the perturbed heads back toward the identity
        let mut model = RegModel::new(tiny_model_cfg(), 11).unwrap();
        perturb_heads(&mut model, 0.05);
        let pair = tiny_pairs(1);
        let pairs = vec![RegPair {
            moving: pair[0].moving.clone(),
            fixed: pair[0].moving.clone(),
        }];
        let cfg = TrainConfig {
            steps: 200,
            lr: 3e-4,
            ..TrainConfig::default()
        };
        let record = train(&mut model, &pairs, &cfg).unwrap();
        assert!(record.initial_loss > 0.0);
        assert!(
            record.final_loss < 0.1 * record.initial_loss,
            "initial {} final {}",
            record.initial_loss,
            record.final_loss
        );
    }

    #[test]
    fn same_seed_gives_bitwise_identical_traces() {
        let pairs = tiny_pairs(2);
        let run = || {
            let mut model = RegModel::new(tiny_model_cfg(), 5).unwrap();
            let cfg = TrainConfig {
                steps: 8,
                deterministic: true,
                ..TrainConfig::default()
            };
            train(&mut model, &pairs, &cfg).unwrap().trace
        };
        let a = run();
        let b = run();
        assert_eq!(trace_to_string(&a), trace_to_string(&b));
    }

    #[test]
    fn frozen_bottleneck_hash_is_invariant_under_training() {
        let mut model = RegModel::new(tiny_model_cfg(), 6).unwrap();
        let before = model.bottleneck_hash();
        let pairs = tiny_pairs(2);
        let cfg = TrainConfig {
            steps: 5,
            ..TrainConfig::default()
        };
        train(&mut model, &pairs, &cfg).unwrap();
        assert_eq!(model.bottleneck_hash(), before);
    }

    #[test]
    fn trainable_mode_changes_the_bottleneck() {
        let mut model = RegModel::new(
            ModelConfig {
                bottleneck_mode: BottleneckMode::Trainable,
                ..tiny_model_cfg()
            },
            6,
        )
        .unwrap();
        let before = model.bottleneck_hash();
        let pairs = tiny_pairs(2);
        let cfg = TrainConfig {
            steps: 5,
            ..TrainConfig::default()
        };
        train(&mut model, &pairs, &cfg).unwrap();
        assert_ne!(model.bottleneck_hash(), before);
    }

    #[test]
    fn step_by_step_cascade_never_mutates_earlier_decoders() {
        use crate::model::params::ParamGroup;
        let mut model = RegModel::new(tiny_model_cfg(), 7).unwrap();
        let pairs = tiny_pairs(2);
        let base = TrainConfig {
            steps: 4,
            ..TrainConfig::default()
        };
        let records =
            train_cascade(&mut model, &pairs, &[base, base], CascadeMode::StepByStep).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(model.trained_steps, 2);

        // retrain step 2 only; step-1 decoder and trunk must stay bitwise identical
        let step1_hash = model
            .store()
            .hash_params(|g| matches!(g, ParamGroup::StepDecoder(0) | ParamGroup::StepAdapters(0)));
        let trunk_hash = model.store().hash_params(|g| {
            matches!(
                g,
                ParamGroup::Encoder
                    | ParamGroup::Adapter0
                    | ParamGroup::InnerAdapter
                    | ParamGroup::PosEmbed
                    | ParamGroup::Bottleneck
            )
        });
        let cfg2 = TrainConfig {
            phase: TrainPhase::CascadeStep(2),
            steps: 4,
            ..TrainConfig::default()
        };
        train(&mut model, &pairs, &cfg2).unwrap();
        assert_eq!(
            model
                .store()
                .hash_params(|g| matches!(g, ParamGroup::StepDecoder(0) | ParamGroup::StepAdapters(0))),
            step1_hash
        );
        assert_eq!(
            model.store().hash_params(|g| {
                matches!(
                    g,
                    ParamGroup::Encoder
                        | ParamGroup::Adapter0
                        | ParamGroup::InnerAdapter
                        | ParamGroup::PosEmbed
                        | ParamGroup::Bottleneck
                )
            }),
            trunk_hash
        );
    }

    #[test]
    fn cascade_step_without_predecessor_is_rejected() {
        let mut model = RegModel::new(tiny_model_cfg(), 8).unwrap();
        let pairs = tiny_pairs(1);
        let cfg = TrainConfig {
            phase: TrainPhase::CascadeStep(2),
            steps: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &pairs, &cfg),
            Err(TrainError::PhaseOrder { .. })
        ));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut model = RegModel::new(tiny_model_cfg(), 8).unwrap();
        let cfg = TrainConfig::default();
        assert!(matches!(
            train(&mut model, &[], &cfg),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn exploding_lr_aborts_with_the_step_number() {
        let mut model = RegModel::new(tiny_model_cfg(), 9).unwrap();
        let pairs = tiny_pairs(1);
        let cfg = TrainConfig {
            lr: 1e9,
            steps: 60,
            ..TrainConfig::default()
        };
        match train(&mut model, &pairs, &cfg) {
            Err(TrainError::NonFiniteLoss { step, .. }) => assert!(step > 0),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut model = RegModel::new(tiny_model_cfg(), 10).unwrap();
        let pairs = tiny_pairs(2);
        let cfg = TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        };
        train(&mut model, &pairs, &cfg).unwrap();

        let bytes = checkpoint_to_bytes(&model);
        let loaded = checkpoint_from_bytes(&bytes, None).unwrap();
        assert_eq!(checkpoint_to_bytes(&loaded), bytes);
        assert_eq!(loaded.trained_steps, model.trained_steps);
        assert_eq!(loaded.completed_steps, model.completed_steps);

        // forward outputs reproduce bitwise
        let (phi_a, _) = model
            .register_pair(&pairs[0].moving, &pairs[0].fixed)
            .unwrap();
        let (phi_b, _) = loaded
            .register_pair(&pairs[0].moving, &pairs[0].fixed)
            .unwrap();
        assert_eq!(phi_a, phi_b);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let model = RegModel::new(tiny_model_cfg(), 10).unwrap();
        let bytes = checkpoint_to_bytes(&model);
        assert!(matches!(
            checkpoint_from_bytes(&bytes[..bytes.len() - 5], None),
            Err(TrainError::CheckpointCorrupt(_))
        ));
    }

    #[test]
    fn config_mismatch_is_rejected_on_load() {
        let model = RegModel::new(tiny_model_cfg(), 10).unwrap();
        let bytes = checkpoint_to_bytes(&model);
        let other = ModelConfig {
            d_model: 64,
            ..tiny_model_cfg()
        };
        assert!(matches!(
            checkpoint_from_bytes(&bytes, Some(&other)),
            Err(TrainError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn resumed_training_continues_the_trace() {
        let mut model = RegModel::new(tiny_model_cfg(), 12).unwrap();
        let pairs = tiny_pairs(2);
        let cfg = TrainConfig {
            steps: 4,
            ..TrainConfig::default()
        };
        train(&mut model, &pairs, &cfg).unwrap();
        let bytes = checkpoint_to_bytes(&model);
        let mut resumed = checkpoint_from_bytes(&bytes, None).unwrap();
        let record = train(&mut resumed, &pairs, &cfg).unwrap();
        assert_eq!(record.trace[0].step, 4);
    }
}
