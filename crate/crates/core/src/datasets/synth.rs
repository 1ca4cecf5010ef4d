//! Built-in three-class benchmark: sine, square and AR(1) filtered noise.
//!
//! Every channel of a window carries the same latent waveform with its own
//! gain, phase offset and additive measurement noise, so both the temporal
//! shape and the cross-channel agreement carry class evidence.

use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

use super::{prepare_windows, NormStats, SensorWindow, WindowMeta, WindowedDataset};
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

pub const CLASS_NAMES: [&str; 3] = ["sine", "square", "filtered_noise"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub window_len: usize,
    pub num_channels: usize,
    pub train_windows: usize,
    pub test_windows: usize,
    pub seed: u64,
    /// Cycles per window of the sine class, drawn uniformly from the range.
    pub sine_cycles: [f64; 2],
    /// Cycles per window of the square class.
    pub square_cycles: [f64; 2],
    /// Std of the per-sample measurement noise, relative to unit signal.
    pub noise_std: f64,
    /// AR(1) coefficient of the filtered-noise class; negative values give
    /// high-pass noise that stays apart from the low-frequency sine band.
    pub ar_coef: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            window_len: 64,
            num_channels: 3,
            train_windows: 600,
            test_windows: 300,
            seed: 0,
            sine_cycles: [1.5, 3.0],
            square_cycles: [5.0, 8.0],
            noise_std: 0.1,
            ar_coef: -0.7,
        }
    }
}

fn latent(class: usize, len: usize, cfg: &SynthConfig, rng: &mut RngState) -> Vec<f64> {
    let [lo, hi] = if class == 1 { cfg.square_cycles } else { cfg.sine_cycles };
    let cycles = lo + (hi - lo) * rng.uniform();
    let phase = TAU * rng.uniform();
    let omega = TAU * cycles / len as f64;
    match class {
        0 => (0..len).map(|k| (omega * k as f64 + phase).sin() * std::f64::consts::SQRT_2).collect(),
        1 => (0..len)
            .map(|k| if (omega * k as f64 + phase).sin() >= 0.0 { 1.0 } else { -1.0 })
            .collect(),
        _ => {
            // Stationary AR(1) with unit marginal variance.
            let a = cfg.ar_coef;
            let innov = (1.0 - a * a).sqrt();
            let mut h = rng.normal();
            (0..len)
                .map(|_| {
                    h = a * h + innov * rng.normal();
                    h
                })
                .collect()
        }
    }
}

fn synth_window(index: usize, class: usize, cfg: &SynthConfig, rng: &mut RngState) -> Result<SensorWindow> {
    let (len, c) = (cfg.window_len, cfg.num_channels);
    let base = latent(class, len, cfg, rng);
    let mut data = vec![0.0; len * c];
    for ch in 0..c {
        let gain = 0.8 + 0.4 * rng.uniform();
        let lag = rng.int_inclusive(0, 2) as usize;
        let offset = 0.2 * (rng.uniform() - 0.5);
        for k in 0..len {
            let src = base[(k + lag).min(len - 1)];
            data[k * c + ch] = gain * src + offset + cfg.noise_std * rng.normal();
        }
    }
    Ok(SensorWindow {
        x: Tensor::new(data, &[len, c])?,
        label: class,
        meta: WindowMeta {
            recording: format!("synth-{}", CLASS_NAMES[class]),
            start: index,
        },
    })
}

/// Generates the train/test splits, z-scored with training statistics.
pub fn generate(cfg: &SynthConfig) -> Result<(WindowedDataset, WindowedDataset, NormStats)> {
    if cfg.window_len < 2 || cfg.num_channels == 0 || cfg.train_windows == 0 || cfg.test_windows == 0 {
        return Err(Error::config("synthetic task needs positive sizes and window_len >= 2"));
    }
    let total = cfg.train_windows + cfg.test_windows;
    let root = RngState::new(cfg.seed);
    let windows = (0..total)
        .map(|i| synth_window(i, i % 3, cfg, &mut root.derive_path(&[1, i as u64])))
        .collect::<Result<Vec<_>>>()?;
    let frac = cfg.train_windows as f64 / total as f64;
    prepare_windows(&windows, frac, 3, &mut root.derive(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_and_balance() {
        let (train, test, stats) = generate(&SynthConfig::default()).unwrap();
        assert_eq!(train.len(), 600);
        assert_eq!(test.len(), 300);
        assert_eq!(train.window_len(), 64);
        assert_eq!(train.num_channels(), 3);
        assert_eq!(stats.mean.len(), 3);
        let counts = test.class_counts();
        assert!(counts.iter().all(|&n| n > 70), "{counts:?}");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig { train_windows: 20, test_windows: 10, ..Default::default() };
        let (a, _, _) = generate(&cfg).unwrap();
        let (b, _, _) = generate(&cfg).unwrap();
        for (x, y) in a.windows.iter().zip(&b.windows) {
            assert_eq!(x.x.data(), y.x.data());
        }
    }
}
