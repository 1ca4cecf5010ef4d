//! Metrics, robustness and sensitivity sweeps, and array exports.

mod export;
mod sweep;

pub use export::{export_arrays, ExportKind};
pub use sweep::{sensitivity_sweep, sweep, SensitivityAxis, SensitivityPoint, SensitivityResult, SweepAxis, SweepPoint, SweepResult};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corruption::{apply_eval_corruption, EvalCorruptionSpec};
use crate::datasets::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{forward, EncoderOutput, EncoderParams, Mode};
use crate::numerics::{no_grad, RngState, Tensor};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            num_classes,
            counts: vec![vec![0; num_classes]; num_classes],
        }
    }

    pub fn from_pairs(num_classes: usize, pairs: &[(usize, usize)]) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(num_classes);
        for &(truth, pred) in pairs {
            cm.record(truth, pred)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.num_classes || pred >= self.num_classes {
            return Err(Error::Contract(format!(
                "class pair ({truth}, {pred}) outside [0, {})",
                self.num_classes
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Accuracy as trace/total; one-vs-rest precision, recall and F1 per
/// class, macro-averaged. Zero denominators score 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::data("confusion matrix is empty"));
    }
    let k = cm.num_classes;
    let per_class: Vec<ClassMetrics> = (0..k)
        .map(|c| {
            let tp = cm.counts[c][c];
            let support: u64 = cm.counts[c].iter().sum();
            let predicted: u64 = (0..k).map(|r| cm.counts[r][c]).sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics { precision, recall, f1, support }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(MetricsReport {
        accuracy: ratio(cm.trace(), total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        per_class,
        confusion: cm.clone(),
    })
}

/// Index of the largest logit; ties go to the lowest index.
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

/// Inference-mode encoder outputs for every window, in dataset order.
/// Window `i` is corrupted with substream `rng.derive(i)`.
pub fn encode_all(
    params: &EncoderParams,
    data: &WindowedDataset,
    spec: Option<&EvalCorruptionSpec>,
    rng: &RngState,
) -> Result<Vec<EncoderOutput>> {
    let cfg = &params.config;
    if data.num_classes != cfg.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model has {}",
            data.num_classes, cfg.num_classes
        )));
    }
    if let Some(s) = spec {
        s.validate()?;
    }
    data.windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            no_grad(|| {
                let x = match spec {
                    Some(s) => apply_eval_corruption(&w.x, s, &mut rng.derive(i as u64))?,
                    None => w.x.clone(),
                };
                forward(&x, cfg.inference_timestep(), params, Mode::Infer, &mut RngState::new(0))
            })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Single inference pass per window, optionally corrupted by `spec`.
pub fn evaluate(
    params: &EncoderParams,
    data: &WindowedDataset,
    spec: Option<&EvalCorruptionSpec>,
    rng: &RngState,
) -> Result<MetricsReport> {
    let outputs = encode_all(params, data, spec, rng)?;
    let mut cm = ConfusionMatrix::new(data.num_classes);
    for (w, out) in data.windows.iter().zip(&outputs) {
        cm.record(w.label, argmax(&out.logits))?;
    }
    compute_metrics(&cm)
}

#[cfg(test)]
mod tests;
