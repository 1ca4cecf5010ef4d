//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("AdamW betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("AdamW eps must be positive and weight_decay non-negative"));
        }
        Ok(())
    }
}

/// First and second moments for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Whether weight decay applies (matrices only; biases, norms and
    /// scalars are exempt).
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
    /// Round parameters and moments to f32 after every update.
    pub f32_storage: bool,
}

fn round(v: f64, on: bool) -> f64 {
    if on {
        v as f32 as f64
    } else {
        v
    }
}

impl AdamW {
    /// `shapes` lists each parameter's shape in update order.
    pub fn new(config: AdamWConfig, shapes: &[Vec<usize>]) -> AdamW {
        let moments = shapes
            .iter()
            .map(|s| {
                let n = s.iter().product();
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    decay: s.len() >= 2,
                }
            })
            .collect();
        AdamW {
            config,
            step: 0,
            moments,
            f32_storage: false,
        }
    }

    /// One update of every parameter in place.
    pub fn update(&mut self, params: &mut [Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        let store = self.f32_storage;
        for ((p, g), mo) in params.iter_mut().zip(grads).zip(&mut self.moments) {
            if p.len() != mo.m.len() || g.len() != mo.m.len() {
                return Err(Error::shape("optimizer: tensor size changed between steps"));
            }
            let shrink = if mo.decay { 1.0 - c.lr * c.weight_decay } else { 1.0 };
            for i in 0..p.len() {
                let m = c.beta1 * mo.m[i] + (1.0 - c.beta1) * g[i];
                let v = c.beta2 * mo.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                mo.m[i] = round(m, store);
                mo.v[i] = round(v, store);
                let step = c.lr * (m / bias1) / ((v / bias2).sqrt() + c.eps);
                p[i] = round(p[i] * shrink - step, store);
            }
        }
        Ok(())
    }
}
