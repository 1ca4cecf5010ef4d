//! Twin-view training loop, AdamW updates and checkpoint persistence.
//!
//! Every random draw is taken from a counter-based substream addressed by
//! `(seed, purpose, epoch, batch, window)`, so results do not depend on the
//! number of worker threads.

pub mod checkpoint;
pub mod gradcheck;
pub mod optimizer;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointFile, NamedTensor, FORMAT_VERSION, MAGIC};
pub use gradcheck::{full_loss_grad_check, toy_model_config, GroupError};
pub use optimizer::{AdamW, AdamWConfig, Moments};

use crate::corruption::{apply_physical, make_twin_views, CorruptionConfig, DiffusionSchedule, PhysicalCorruptionConfig, TwinView};
use crate::datasets::{SensorWindow, WindowedDataset};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, MetricsReport};
use crate::model::{forward, EncoderParams, Mode, ModelConfig};
use crate::numerics::{no_grad, RngState, Tensor};
use crate::objectives::{classification_loss, consistency_loss, total_loss, LossWeights};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_BATCH: u64 = 3;

/// Switches mirroring the component-removal study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    pub physical_corruption: bool,
    pub consistency: bool,
    pub spatial_branch: bool,
    pub temporal_branch: bool,
    pub adaptive_fusion: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            physical_corruption: true,
            consistency: true,
            spatial_branch: true,
            temporal_branch: true,
            adaptive_fusion: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamWConfig::default();
        TrainConfig {
            batch_size: 64,
            epochs: 200,
            seed: 0,
            lr: adam.lr,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            grad_clip: 1.0,
            ablation: AblationFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("train.batch_size and train.epochs must be >= 1"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.grad_clip must be non-negative"));
        }
        self.adamw().validate()
    }
}

/// Everything that determines a training run, stored in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub corruption: CorruptionConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
}

impl TrainSetup {
    /// Copy with the ablation flags folded into the component configs and
    /// the inference timestep pinned to the diffusion schedule.
    pub fn resolved(&self) -> TrainSetup {
        let mut out = self.clone();
        if out.model.t_infer.is_none() {
            out.model.t_infer = Some(self.corruption.diffusion.steps.div_ceil(2).max(1));
        }
        let flags = self.train.ablation;
        out.model.streams.temporal &= flags.temporal_branch;
        out.model.streams.spatial &= flags.spatial_branch;
        out.model.streams.adaptive_fusion &= flags.adaptive_fusion;
        if !flags.physical_corruption {
            out.corruption.physical = PhysicalCorruptionConfig::disabled();
        }
        if !flags.consistency {
            out.loss.lambda_cons = 0.0;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolved();
        r.model.validate()?;
        r.corruption.physical.validate()?;
        r.corruption.diffusion.schedule()?;
        r.loss.validate()?;
        r.train.validate()
    }
}

/// Loss terms of one window.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Tensor,
    pub cls: Tensor,
    pub cons: Tensor,
}

/// Loss of one window given its twin views. The low view is encoded under
/// `no_grad` and skipped entirely when its weight is zero.
pub fn window_loss(
    params: &EncoderParams,
    views: &TwinView,
    label: usize,
    loss: &LossWeights,
    dropout_rng: &mut RngState,
) -> Result<LossParts> {
    let high = forward(&views.x_high, views.t_high, params, Mode::Train, dropout_rng)?;
    let cls = classification_loss(&high.logits, label)?;
    let cons = if loss.lambda_cons > 0.0 {
        let low = no_grad(|| forward(&views.x_low, views.t_low, params, Mode::Eval, &mut dropout_rng.clone()))?;
        if loss.cons_on_pooled {
            consistency_loss(&high.z_pooled, &low.z_pooled)?
        } else {
            consistency_loss(&high.z_seq, &low.z_seq)?
        }
    } else {
        Tensor::scalar(0.0)
    };
    let total = total_loss(&cons, &cls, loss)?;
    Ok(LossParts { total, cls, cons })
}

struct WindowOutcome {
    total: f64,
    cls: f64,
    cons: f64,
    grads: Vec<Vec<f64>>,
}

fn window_outcome(
    params: &EncoderParams,
    window: &SensorWindow,
    setup: &TrainSetup,
    sched: &DiffusionSchedule,
    rng: &RngState,
) -> Result<WindowOutcome> {
    let x_tilde = apply_physical(&window.x, &setup.corruption.physical, &mut rng.derive(0))?;
    let views = make_twin_views(&x_tilde, sched, &mut rng.derive(1))?;
    let parts = window_loss(params, &views, window.label, &setup.loss, &mut rng.derive(2))?;
    let g = parts.total.gradients()?;
    Ok(WindowOutcome {
        total: parts.total.item()?,
        cls: parts.cls.item()?,
        cons: parts.cons.item()?,
        grads: params.named().iter().map(|(_, t)| g.get_or_zeros(t)).collect(),
    })
}

/// Mutable training state: parameters, optimizer and progress counters.
#[derive(Clone, Debug)]
pub struct TrainerState {
    pub setup: TrainSetup,
    pub params: EncoderParams,
    pub optimizer: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    /// Best clean test macro-F1 so far; -1 before the first evaluation.
    pub best_f1: f64,
    pub best_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub cls: f64,
    pub cons: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    setup: TrainSetup,
    epoch: usize,
    step: u64,
    rng: RngState,
    best_f1: f64,
    best_epoch: usize,
}

const MOMENT_M: &str = "adamw.m.";
const MOMENT_V: &str = "adamw.v.";

impl TrainerState {
    pub fn new(setup: &TrainSetup) -> Result<TrainerState> {
        setup.validate()?;
        let resolved = setup.resolved();
        let params = EncoderParams::init(&resolved.model, &mut RngState::new(setup.train.seed).derive(TAG_INIT))?;
        let shapes: Vec<Vec<usize>> = params.named().iter().map(|(_, t)| t.shape().to_vec()).collect();
        let mut optimizer = AdamW::new(setup.train.adamw(), &shapes);
        optimizer.f32_storage = true;
        Ok(TrainerState {
            setup: setup.clone(),
            params,
            optimizer,
            epoch: 0,
            best_f1: -1.0,
            best_epoch: 0,
        })
    }

    pub fn to_checkpoint(&self) -> Result<CheckpointFile> {
        let named = self.params.named();
        let mut tensors: Vec<NamedTensor> = named
            .iter()
            .map(|(n, t)| NamedTensor { name: n.clone(), shape: t.shape().to_vec(), data: t.to_vec() })
            .collect();
        for ((n, t), mo) in named.iter().zip(&self.optimizer.moments) {
            for (prefix, data) in [(MOMENT_M, &mo.m), (MOMENT_V, &mo.v)] {
                tensors.push(NamedTensor { name: format!("{prefix}{n}"), shape: t.shape().to_vec(), data: data.clone() });
            }
        }
        let meta = CheckpointMeta {
            setup: self.setup.clone(),
            epoch: self.epoch,
            step: self.optimizer.step,
            rng: RngState::new(self.setup.train.seed),
            best_f1: self.best_f1,
            best_epoch: self.best_epoch,
        };
        Ok(CheckpointFile { tensors, json: serde_json::to_string(&meta)? })
    }

    pub fn from_checkpoint(file: &CheckpointFile) -> Result<TrainerState> {
        let meta: CheckpointMeta =
            serde_json::from_str(&file.json).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        let mut state = TrainerState::new(&meta.setup)?;
        let lookup = |name: &str| {
            file.tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor '{name}'")))
        };
        let values = state
            .params
            .named()
            .iter()
            .map(|(n, _)| lookup(n).map(|t| (t.name.clone(), t.shape.clone(), t.data.clone())))
            .collect::<Result<Vec<_>>>()?;
        state.params.load_named(&values)?;
        let names: Vec<String> = state.params.named().into_iter().map(|(n, _)| n).collect();
        for (n, mo) in names.iter().zip(state.optimizer.moments.iter_mut()) {
            let m = lookup(&format!("{MOMENT_M}{n}"))?;
            let v = lookup(&format!("{MOMENT_V}{n}"))?;
            if m.data.len() != mo.m.len() || v.data.len() != mo.v.len() {
                return Err(Error::Format(format!("optimizer moments for '{n}' have the wrong size")));
            }
            mo.m.clone_from(&m.data);
            mo.v.clone_from(&v.data);
        }
        state.optimizer.step = meta.step;
        state.epoch = meta.epoch;
        state.best_f1 = meta.best_f1;
        state.best_epoch = meta.best_epoch;
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<TrainerState> {
        TrainerState::from_checkpoint(&CheckpointFile::load(path)?)
    }

    /// Batch gradient, clipping and one AdamW update.
    pub fn train_step(&mut self, batch: &[&SensorWindow], batch_rng: &RngState) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Contract("train_step: empty batch".into()));
        }
        let setup = self.setup.resolved();
        let sched = setup.corruption.diffusion.schedule()?;
        let params = &self.params;
        let diagnostics = || {
            batch
                .iter()
                .map(|w| format!("{}@{}", w.meta.recording, w.meta.start))
                .collect::<Vec<_>>()
                .join(", ")
        };
        let outcomes = batch
            .par_iter()
            .enumerate()
            .map(|(i, w)| window_outcome(params, w, &setup, &sched, &batch_rng.derive(i as u64)))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg}; batch windows: {}", diagnostics())),
                other => other,
            })?;

        let n = outcomes.len() as f64;
        let mut grads: Vec<Vec<f64>> = params.named().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let (mut loss, mut cls, mut cons) = (0.0, 0.0, 0.0);
        for o in &outcomes {
            loss += o.total;
            cls += o.cls;
            cons += o.cons;
            for (acc, g) in grads.iter_mut().zip(&o.grads) {
                acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        let (loss, cls, cons) = (loss / n, cls / n, cons / n);
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite loss {loss}; batch windows: {}", diagnostics())));
        }
        grads.iter_mut().flatten().for_each(|g| *g /= n);
        let grad_norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::numeric(format!("non-finite gradient norm; batch windows: {}", diagnostics())));
        }
        let clip = setup.train.grad_clip;
        if clip > 0.0 && grad_norm > clip {
            let s = clip / grad_norm;
            grads.iter_mut().flatten().for_each(|g| *g *= s);
        }

        let mut values: Vec<Vec<f64>> = self.params.named().iter().map(|(_, t)| t.to_vec()).collect();
        self.optimizer.update(&mut values, &grads)?;
        for ((_, slot), data) in self.params.named_mut().into_iter().zip(values) {
            *slot = Tensor::parameter(data, &slot.shape().to_vec())?;
        }
        Ok(StepStats { loss, cls, cons, grad_norm })
    }

    /// One pass over `train` in a seed-determined order. Returns per-step stats.
    pub fn train_epoch(&mut self, train: &WindowedDataset) -> Result<Vec<StepStats>> {
        let root = RngState::new(self.setup.train.seed);
        let epoch = self.epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.derive_path(&[TAG_SHUFFLE, epoch]).shuffle(&mut order);
        let mut stats = Vec::new();
        for (b, chunk) in order.chunks(self.setup.train.batch_size).enumerate() {
            let batch: Vec<&SensorWindow> = chunk.iter().map(|&i| &train.windows[i]).collect();
            stats.push(self.train_step(&batch, &root.derive_path(&[TAG_BATCH, epoch, b as u64]))?);
        }
        self.epoch += 1;
        Ok(stats)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_cls: f64,
    pub train_cons: f64,
    /// Wall-clock seconds spent in training steps (evaluation excluded).
    pub train_seconds: f64,
    pub test: Option<MetricsReport>,
    pub best_macro_f1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    /// Writes `last.ckpt` every epoch and `best.ckpt` on improvement.
    pub out_dir: Option<PathBuf>,
    /// Skip the per-epoch test evaluation (timing runs).
    pub skip_eval: bool,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub last: TrainerState,
    pub best: TrainerState,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
}

fn check_compatible(model: &ModelConfig, data: &WindowedDataset, what: &str) -> Result<()> {
    if data.window_len() != model.window_len || data.num_channels() != model.channels || data.num_classes != model.num_classes {
        return Err(Error::config(format!(
            "{what} split is {} x {} with {} classes, model expects {} x {} with {}",
            data.window_len(),
            data.num_channels(),
            data.num_classes,
            model.window_len,
            model.channels,
            model.num_classes
        )));
    }
    Ok(())
}

/// Trains from scratch for `setup.train.epochs` epochs.
pub fn fit(
    train: &WindowedDataset,
    test: &WindowedDataset,
    setup: &TrainSetup,
    opts: &FitOptions,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    let state = TrainerState::new(setup)?;
    resume(state, train, test, opts, observer)
}

/// Continues `state` until `state.setup.train.epochs` epochs are complete.
pub fn resume(
    mut state: TrainerState,
    train: &WindowedDataset,
    test: &WindowedDataset,
    opts: &FitOptions,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<FitOutcome> {
    check_compatible(&state.setup.model, train, "train")?;
    check_compatible(&state.setup.model, test, "test")?;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut best = state.clone();
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    while state.epoch < state.setup.train.epochs {
        let started = Instant::now();
        let stats = state.train_epoch(train)?;
        let train_seconds = started.elapsed().as_secs_f64();
        let n = stats.len() as f64;
        step_losses.extend(stats.iter().map(|s| s.loss));

        let report = if opts.skip_eval {
            None
        } else {
            Some(evaluate(&state.params, test, None, &RngState::new(state.setup.train.seed))?)
        };
        if let Some(r) = &report {
            if r.macro_f1 > state.best_f1 {
                state.best_f1 = r.macro_f1;
                state.best_epoch = state.epoch;
                best = state.clone();
                if let Some(dir) = &opts.out_dir {
                    best.save(&dir.join("best.ckpt"))?;
                }
            }
        }
        if let Some(dir) = &opts.out_dir {
            state.save(&dir.join("last.ckpt"))?;
        }
        let record = EpochRecord {
            epoch: state.epoch,
            train_loss: stats.iter().map(|s| s.loss).sum::<f64>() / n,
            train_cls: stats.iter().map(|s| s.cls).sum::<f64>() / n,
            train_cons: stats.iter().map(|s| s.cons).sum::<f64>() / n,
            train_seconds,
            test: report,
            best_macro_f1: state.best_f1,
        };
        observer(&record);
        history.push(record);
    }
    if opts.skip_eval {
        best = state.clone();
    }
    Ok(FitOutcome { last: state, best, history, step_losses })
}
