//! Finite-difference check of the full training loss, one row per parameter.

use serde::Serialize;

use crate::corruption::{apply_physical, make_twin_views, CorruptionConfig};
use crate::error::Result;
use crate::model::{forward, EncoderParams, Mode, ModelConfig};
use crate::numerics::{grad_check_report, no_grad, RngState, Tensor};
use crate::objectives::{classification_loss, consistency_loss, total_loss, LossWeights};

/// Toy shapes used by `mcstn grad-check`: L=8, C=4, D=6, N=4.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        window_len: 8,
        channels: 4,
        latent_dim: 6,
        state_dim: 4,
        num_blocks: 2,
        num_classes: 3,
        time_embed_dim: 16,
        ..Default::default()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
}

/// Checks d(total loss)/d(theta) for every named parameter. The low-view
/// target is encoded once and held fixed, matching its stop-gradient role.
pub fn full_loss_grad_check(
    model: &ModelConfig,
    diffusion_steps: usize,
    seed: u64,
    eps: f64,
) -> Result<Vec<GroupError>> {
    let root = RngState::new(seed);
    let params = EncoderParams::init(model, &mut root.derive(0))?;
    let mut corruption = CorruptionConfig::default();
    corruption.diffusion.steps = diffusion_steps;
    let sched = corruption.diffusion.schedule()?;
    let loss = LossWeights::default();

    let mut data_rng = root.derive(1);
    let x = Tensor::new(data_rng.normals(model.window_len * model.channels), &[model.window_len, model.channels])?;
    let label = data_rng.int_inclusive(0, model.num_classes as u64 - 1) as usize;
    let x_tilde = apply_physical(&x, &corruption.physical, &mut root.derive(2))?;
    let views = make_twin_views(&x_tilde, &sched, &mut root.derive(3))?;
    let dropout_rng = root.derive(4);
    let target = no_grad(|| forward(&views.x_low, views.t_low, &params, Mode::Eval, &mut dropout_rng.clone()))?
        .z_seq
        .detach();

    let objective = |p: &EncoderParams| -> Result<Tensor> {
        let high = forward(&views.x_high, views.t_high, p, Mode::Train, &mut dropout_rng.clone())?;
        let cons = consistency_loss(&high.z_seq, &target)?;
        let cls = classification_loss(&high.logits, label)?;
        total_loss(&cons, &cls, &loss)
    };

    params
        .named()
        .into_iter()
        .map(|(name, value)| {
            let f = |t: &Tensor| objective(&params.with_tensor(&name, t.clone())?);
            let report = grad_check_report(f, value, eps);
            Ok(GroupError { numel: value.numel(), max_rel_error: report.max_rel_error, name })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_group_passes_on_toy_shapes() {
        let rows = full_loss_grad_check(&toy_model_config(), 16, 0, 1e-5).unwrap();
        assert_eq!(rows.len(), 42);
        for r in &rows {
            assert!(r.max_rel_error < 1e-3, "{}: {}", r.name, r.max_rel_error);
        }
    }
}
