//! Robustness sweeps over evaluation corruption and sensitivity sweeps
//! that retrain per grid point.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::evaluate;
use crate::corruption::EvalCorruptionSpec;
use crate::datasets::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::EncoderParams;
use crate::numerics::RngState;
use crate::trainer::{fit, FitOptions, TrainSetup};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    /// Missing-timestep ratio.
    Rho,
    /// Additive noise intensity.
    Lambda,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Rho => "rho",
            SweepAxis::Lambda => "lambda",
        }
    }

    pub fn spec(self, value: f64) -> EvalCorruptionSpec {
        match self {
            SweepAxis::Rho => EvalCorruptionSpec::Missing { rho: value },
            SweepAxis::Lambda => EvalCorruptionSpec::Noise { lambda: value },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// One row per (grid value, seed), grid-major.
    pub points: Vec<SweepPoint>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_grid(grid: &[f64], seeds: &[u64]) -> Result<()> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep needs a non-empty grid and at least one seed"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config(format!("sweep grid {grid:?} is not strictly increasing")));
    }
    Ok(())
}

fn write_rows(path: &Path, rows: impl Iterator<Item = (String, f64, u64, &'static str, f64)>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["axis", "value", "seed", "metric", "score"])?;
    for (axis, value, seed, metric, score) in rows {
        w.write_record([axis, value.to_string(), seed.to_string(), metric.to_string(), score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

impl SweepResult {
    /// (mean, std) of macro-F1 per grid value.
    pub fn summary(&self) -> Vec<(f64, f64, f64)> {
        self.grid
            .iter()
            .map(|&v| {
                let scores: Vec<f64> = self.points.iter().filter(|p| p.value == v).map(|p| p.macro_f1).collect();
                let (m, s) = mean_std(&scores);
                (v, m, s)
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let axis = self.axis.name();
        write_rows(
            path,
            self.points.iter().flat_map(|p| {
                [
                    (axis.to_string(), p.value, p.seed, "macro_f1", p.macro_f1),
                    (axis.to_string(), p.value, p.seed, "accuracy", p.accuracy),
                ]
            }),
        )
    }
}

/// Evaluates a trained model at every (grid value, seed). The seed picks
/// the corruption substream, shared across grid values.
pub fn sweep(params: &EncoderParams, data: &WindowedDataset, axis: SweepAxis, grid: &[f64], seeds: &[u64]) -> Result<SweepResult> {
    check_grid(grid, seeds)?;
    let mut points = Vec::with_capacity(grid.len() * seeds.len());
    for &value in grid {
        let spec = axis.spec(value);
        spec.validate()?;
        for &seed in seeds {
            let report = evaluate(params, data, Some(&spec), &RngState::new(seed))?;
            points.push(SweepPoint {
                value,
                seed,
                accuracy: report.accuracy,
                macro_f1: report.macro_f1,
            });
        }
    }
    Ok(SweepResult {
        axis,
        grid: grid.to_vec(),
        seeds: seeds.to_vec(),
        points,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensitivityAxis {
    /// Diffusion steps T.
    T,
    LambdaCons,
}

impl SensitivityAxis {
    pub fn name(self) -> &'static str {
        match self {
            SensitivityAxis::T => "T",
            SensitivityAxis::LambdaCons => "lambda_cons",
        }
    }

    fn apply(self, setup: &mut TrainSetup, value: f64) -> Result<()> {
        match self {
            SensitivityAxis::T => {
                if value.fract() != 0.0 || value < 4.0 {
                    return Err(Error::config(format!("T grid value {value} must be an integer >= 4")));
                }
                setup.corruption.diffusion.steps = value as usize;
            }
            SensitivityAxis::LambdaCons => setup.loss.lambda_cons = value,
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub value: f64,
    pub seed: u64,
    pub clean_macro_f1: f64,
    /// Macro-F1 under additive noise of the configured intensity.
    pub noisy_macro_f1: f64,
    /// Mean training seconds per epoch, evaluation excluded.
    pub epoch_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityResult {
    pub axis: SensitivityAxis,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub noise_lambda: f64,
    pub points: Vec<SensitivityPoint>,
}

impl SensitivityResult {
    fn mean_of(&self, value: f64, f: fn(&SensitivityPoint) -> f64) -> f64 {
        let xs: Vec<f64> = self.points.iter().filter(|p| p.value == value).map(f).collect();
        mean_std(&xs).0
    }

    pub fn mean_clean_f1(&self, value: f64) -> f64 {
        self.mean_of(value, |p| p.clean_macro_f1)
    }

    pub fn mean_noisy_f1(&self, value: f64) -> f64 {
        self.mean_of(value, |p| p.noisy_macro_f1)
    }

    pub fn mean_epoch_seconds(&self, value: f64) -> f64 {
        self.mean_of(value, |p| p.epoch_seconds)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let axis = self.axis.name();
        write_rows(
            path,
            self.points.iter().flat_map(|p| {
                [
                    (axis.to_string(), p.value, p.seed, "clean_macro_f1", p.clean_macro_f1),
                    (axis.to_string(), p.value, p.seed, "noisy_macro_f1", p.noisy_macro_f1),
                    (axis.to_string(), p.value, p.seed, "epoch_seconds", p.epoch_seconds),
                ]
            }),
        )
    }
}

/// Retrains from scratch for every (grid value, seed) and scores the final
/// model on clean and noisy test data.
pub fn sensitivity_sweep(
    train: &WindowedDataset,
    test: &WindowedDataset,
    base: &TrainSetup,
    axis: SensitivityAxis,
    grid: &[f64],
    seeds: &[u64],
    noise_lambda: f64,
) -> Result<SensitivityResult> {
    check_grid(grid, seeds)?;
    let noise = EvalCorruptionSpec::Noise { lambda: noise_lambda };
    noise.validate()?;
    let mut points = Vec::new();
    for &value in grid {
        for &seed in seeds {
            let mut setup = base.clone();
            axis.apply(&mut setup, value)?;
            setup.train.seed = seed;
            let outcome = fit(train, test, &setup, &FitOptions { skip_eval: true, ..Default::default() }, &mut |_| {})?;
            let params = &outcome.last.params;
            let epochs = outcome.history.len().max(1) as f64;
            let epoch_seconds = outcome.history.iter().map(|r| r.train_seconds).sum::<f64>() / epochs;
            let rng = RngState::new(seed);
            points.push(SensitivityPoint {
                value,
                seed,
                clean_macro_f1: evaluate(params, test, None, &rng)?.macro_f1,
                noisy_macro_f1: evaluate(params, test, Some(&noise), &rng)?.macro_f1,
                epoch_seconds,
            });
        }
    }
    Ok(SensitivityResult {
        axis,
        grid: grid.to_vec(),
        seeds: seeds.to_vec(),
        noise_lambda,
        points,
    })
}
