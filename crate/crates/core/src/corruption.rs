//! Corruption models: physical masking and sensor noise, the forward
//! diffusion process with its twin-view sampler, and the evaluation-time
//! missing-data and noise protocols.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

/// Hardware-level degradation: whole-timestep dropouts in bursts, plus
/// additive Gaussian sensor noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicalCorruptionConfig {
    /// Expected fraction of masked timesteps.
    pub mask_rate: f64,
    /// Expected length of one masked burst, in timesteps.
    pub mean_burst_len: f64,
    /// Std of the additive noise, in normalised units.
    pub sensor_noise_std: f64,
}

impl Default for PhysicalCorruptionConfig {
    fn default() -> Self {
        PhysicalCorruptionConfig {
            mask_rate: 0.1,
            mean_burst_len: 5.0,
            sensor_noise_std: 0.05,
        }
    }
}

impl PhysicalCorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::config(format!("mask_rate {} outside [0, 1)", self.mask_rate)));
        }
        if !(self.mean_burst_len >= 1.0) {
            return Err(Error::config(format!("mean_burst_len {} < 1", self.mean_burst_len)));
        }
        if !(self.sensor_noise_std >= 0.0) {
            return Err(Error::config("sensor_noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Per-timestep keep mask (true = observed). Masked and observed runs
/// alternate: masked runs are geometric on {1, 2, ..} with mean `burst`,
/// observed runs geometric on {0, 1, ..} with mean `burst (1 - r) / r`, so the
/// long-run masked fraction is exactly `r`.
fn burst_mask(len: usize, rate: f64, burst: f64, rng: &mut RngState) -> Vec<bool> {
    if rate <= 0.0 {
        return vec![true; len];
    }
    let end_p = 1.0 / burst;
    let mean_gap = burst * (1.0 - rate) / rate;
    let continue_gap = mean_gap / (1.0 + mean_gap);
    let mut keep = Vec::with_capacity(len);
    let mut masked = rng.bernoulli(rate);
    while keep.len() < len {
        if masked {
            keep.push(false);
            if rng.bernoulli(end_p) {
                masked = false;
            }
        } else if rng.bernoulli(continue_gap) {
            keep.push(true);
        } else {
            masked = true;
        }
    }
    keep
}

/// x̃ = (x + ε) ⊙ M with M zeroing whole timesteps.
pub fn apply_physical(x: &Tensor, cfg: &PhysicalCorruptionConfig, rng: &mut RngState) -> Result<Tensor> {
    cfg.validate()?;
    if x.ndim() != 2 {
        return Err(Error::shape(format!("expected L x C window, got {:?}", x.shape())));
    }
    let (len, c) = (x.dim(0), x.dim(1));
    let keep = burst_mask(len, cfg.mask_rate, cfg.mean_burst_len, rng);
    let mut data = x.to_vec();
    if cfg.sensor_noise_std > 0.0 {
        for v in data.iter_mut() {
            *v += cfg.sensor_noise_std * rng.normal();
        }
    }
    for (k, &kept) in keep.iter().enumerate() {
        if !kept {
            data[k * c..(k + 1) * c].fill(0.0);
        }
    }
    Tensor::new(data, x.shape())
}

/// Forward-process settings; `steps` is T.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        build_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Training-time corruption: physical degradation then diffusion.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    pub physical: PhysicalCorruptionConfig,
    pub diffusion: DiffusionConfig,
}

impl PhysicalCorruptionConfig {
    /// No masking and no noise.
    pub fn disabled() -> Self {
        PhysicalCorruptionConfig {
            mask_rate: 0.0,
            mean_burst_len: 1.0,
            sensor_noise_std: 0.0,
        }
    }
}

/// Linear β schedule and the cumulative products ᾱ_t.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    pub steps: usize,
    /// β_1..β_T (index 0 holds β_1).
    pub beta: Vec<f64>,
    /// ᾱ_1..ᾱ_T (index 0 holds ᾱ_1).
    pub alpha_bar: Vec<f64>,
}

pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 2 {
        return Err(Error::config(format!("diffusion steps {steps} < 2")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &beta {
        acc *= 1.0 - b;
        alpha_bar.push(acc);
    }
    Ok(DiffusionSchedule {
        steps,
        beta,
        alpha_bar,
    })
}

impl DiffusionSchedule {
    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps => Ok(self.alpha_bar[t - 1]),
            _ => Err(Error::config(format!("timestep {t} outside [0, {}]", self.steps))),
        }
    }

    /// First timestep of the high-noise half, ceil(T/2).
    pub fn half(&self) -> usize {
        self.steps.div_ceil(2)
    }
}

/// √ᾱ · x̃ + √(1 - ᾱ) · ε for a given ᾱ.
pub fn noise_to_level(x_tilde: &Tensor, alpha_bar: f64, rng: &mut RngState) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&alpha_bar) {
        return Err(Error::config(format!("alpha_bar {alpha_bar} outside [0, 1]")));
    }
    if alpha_bar == 1.0 {
        return Ok(x_tilde.detach());
    }
    let (signal, noise) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    let data = x_tilde
        .data()
        .iter()
        .map(|&v| signal * v + noise * rng.normal())
        .collect();
    Tensor::new(data, x_tilde.shape())
}

/// Forward diffusion to timestep `t` (1 ≤ t ≤ T) with fresh noise.
pub fn diffuse(x_tilde: &Tensor, t: usize, sched: &DiffusionSchedule, rng: &mut RngState) -> Result<Tensor> {
    if t == 0 || t > sched.steps {
        return Err(Error::config(format!("timestep {t} outside [1, {}]", sched.steps)));
    }
    noise_to_level(x_tilde, sched.alpha_bar[t - 1], rng)
}

/// Low- and high-noise diffusions of one physically corrupted window.
#[derive(Clone, Debug)]
pub struct TwinView {
    pub x_low: Tensor,
    pub t_low: usize,
    pub x_high: Tensor,
    pub t_high: usize,
}

/// t_low ~ U[1, ceil(T/2) - 1], t_high ~ U[ceil(T/2), T], independent noise.
pub fn make_twin_views(x_tilde: &Tensor, sched: &DiffusionSchedule, rng: &mut RngState) -> Result<TwinView> {
    if sched.steps < 4 {
        return Err(Error::config(format!("twin views need T >= 4, got {}", sched.steps)));
    }
    let half = sched.half() as u64;
    let t_low = rng.int_inclusive(1, half - 1) as usize;
    let x_low = diffuse(x_tilde, t_low, sched, rng)?;
    let t_high = rng.int_inclusive(half, sched.steps as u64) as usize;
    let x_high = diffuse(x_tilde, t_high, sched, rng)?;
    Ok(TwinView {
        x_low,
        t_low,
        x_high,
        t_high,
    })
}

/// Evaluation-time corruption protocols.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum EvalCorruptionSpec {
    /// Each timestep dropped (all channels zeroed) with probability `rho`.
    Missing { rho: f64 },
    /// Additive `lambda · ε`, ε ~ N(0, I), in z-score units.
    Noise { lambda: f64 },
}

impl EvalCorruptionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            EvalCorruptionSpec::Missing { rho } if !(0.0..=1.0).contains(&rho) => {
                Err(Error::config(format!("missing ratio {rho} outside [0, 1]")))
            }
            EvalCorruptionSpec::Noise { lambda } if !(lambda >= 0.0) => {
                Err(Error::config(format!("noise intensity {lambda} negative")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_identity(&self) -> bool {
        match *self {
            EvalCorruptionSpec::Missing { rho } => rho == 0.0,
            EvalCorruptionSpec::Noise { lambda } => lambda == 0.0,
        }
    }
}

pub fn apply_eval_corruption(x: &Tensor, spec: &EvalCorruptionSpec, rng: &mut RngState) -> Result<Tensor> {
    spec.validate()?;
    if spec.is_identity() {
        return Ok(x.detach());
    }
    if x.ndim() != 2 {
        return Err(Error::shape(format!("expected L x C window, got {:?}", x.shape())));
    }
    let c = x.dim(1);
    let mut data = x.to_vec();
    match *spec {
        EvalCorruptionSpec::Missing { rho } => {
            for row in data.chunks_mut(c) {
                if rng.bernoulli(rho) {
                    row.fill(0.0);
                }
            }
        }
        EvalCorruptionSpec::Noise { lambda } => {
            for v in data.iter_mut() {
                *v += lambda * rng.normal();
            }
        }
    }
    Tensor::new(data, x.shape())
}
