//! Training objective: manifold consistency between the two noise views
//! plus cross-entropy on the high-noise view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_cons: f64,
    pub lambda_cls: f64,
    /// Compare pooled features instead of full sequences.
    pub cons_on_pooled: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cons: 0.2,
            lambda_cls: 1.0,
            cons_on_pooled: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_cons >= 0.0) || !(self.lambda_cls >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.lambda_cons == 0.0 && self.lambda_cls == 0.0 {
            return Err(Error::config("lambda_cons and lambda_cls cannot both be zero"));
        }
        Ok(())
    }
}

/// Mean squared difference. `z_low` is detached here, so no gradient
/// reaches its producers even if the caller forgot to.
pub fn consistency_loss(z_high: &Tensor, z_low: &Tensor) -> Result<Tensor> {
    if z_high.shape() != z_low.shape() {
        return Err(Error::shape(format!(
            "consistency_loss: {:?} vs {:?}",
            z_high.shape(),
            z_low.shape()
        )));
    }
    z_high.sub(&z_low.detach())?.square()?.mean()
}

/// −log softmax(logits)[label] for a single 1 x K or K logit vector.
pub fn classification_loss(logits: &Tensor, label: usize) -> Result<Tensor> {
    let k = logits.numel();
    if label >= k {
        return Err(Error::Contract(format!("label {label} outside [0, {k})")));
    }
    let row = logits.reshape(&[1, k])?;
    row.log_softmax(1)?.slice(1, label, label + 1)?.neg()?.reshape(&[])
}

/// λ_cons · cons + λ_cls · cls.
pub fn total_loss(cons: &Tensor, cls: &Tensor, w: &LossWeights) -> Result<Tensor> {
    cons.scale(w.lambda_cons)?.add(&cls.scale(w.lambda_cls)?)
}
