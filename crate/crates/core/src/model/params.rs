use serde::{Deserialize, Serialize};

use super::ssm::SsmParams;
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

/// Which streams a block runs and how they are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamToggles {
    pub temporal: bool,
    pub spatial: bool,
    /// When false the streams are averaged with fixed α = β = 0.5.
    pub adaptive_fusion: bool,
}

impl Default for StreamToggles {
    fn default() -> Self {
        StreamToggles {
            temporal: true,
            spatial: true,
            adaptive_fusion: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub window_len: usize,
    pub channels: usize,
    pub latent_dim: usize,
    pub state_dim: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    /// Dropout on the pooled feature, training mode only.
    pub dropout: f64,
    /// Input-dependent B and C; false uses static learned vectors.
    pub selective: bool,
    /// Width of the sinusoidal timestep code before projection.
    pub time_embed_dim: usize,
    /// Diffusion timestep fed to the encoder at inference. `None` means
    /// ceil(T/2), the least-noisy timestep the classifier is trained on; it is
    /// filled in from the diffusion schedule when a training setup is resolved.
    /// A config that was never resolved infers at t = 1.
    pub t_infer: Option<usize>,
    pub layer_norm_eps: f64,
    pub streams: StreamToggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window_len: 64,
            channels: 3,
            latent_dim: 64,
            state_dim: 16,
            num_blocks: 2,
            num_classes: 3,
            dropout: 0.1,
            selective: true,
            time_embed_dim: 128,
            t_infer: None,
            layer_norm_eps: 1e-5,
            streams: StreamToggles::default(),
        }
    }
}

impl ModelConfig {
    pub fn inference_timestep(&self) -> usize {
        self.t_infer.unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("window_len", self.window_len),
            ("channels", self.channels),
            ("latent_dim", self.latent_dim),
            ("state_dim", self.state_dim),
            ("num_blocks", self.num_blocks),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::config("model.time_embed_dim must be positive and even"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("model.dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.streams.temporal && !self.streams.spatial {
            return Err(Error::config("at least one of the temporal/spatial streams must be enabled"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// log τ; τ = exp(log_tau) stays positive.
    pub log_tau: Tensor,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub ssm_fwd: SsmParams,
    pub ssm_bwd: SsmParams,
    /// D x D gate projection.
    pub gate: Tensor,
    pub attn: AttentionParams,
    /// D x 2 fusion projection.
    pub fusion: Tensor,
}

/// Every learnable tensor of the encoder and classifier head.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: ModelConfig,
    /// C x D.
    pub input_proj: Tensor,
    /// time_embed_dim x D.
    pub time_proj: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_gamma: Tensor,
    pub final_beta: Tensor,
    /// D x num_classes.
    pub head_w: Tensor,
    /// 1 x num_classes.
    pub head_b: Tensor,
}

fn gaussian(rng: &mut RngState, shape: &[usize], std: f64) -> Result<Tensor> {
    let n = shape.iter().product();
    Tensor::parameter(rng.normals(n).into_iter().map(|v| v * std).collect(), shape)
}

fn constant(shape: &[usize], value: f64) -> Result<Tensor> {
    Tensor::parameter(vec![value; shape.iter().product()], shape)
}

fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

fn init_ssm(cfg: &ModelConfig, rng: &mut RngState) -> Result<SsmParams> {
    let (d, n) = (cfg.latent_dim, cfg.state_dim);
    // A = -(1..N) for every channel.
    let a_log = (0..d * n).map(|i| ((i % n) as f64 + 1.0).ln()).collect();
    // Step sizes start log-uniform in [0.01, 0.1].
    let (lo, hi) = (0.01f64.ln(), 0.1f64.ln());
    let delta_bias = (0..d)
        .map(|_| softplus_inv((lo + (hi - lo) * rng.uniform()).exp()))
        .collect();
    let scale = 1.0 / (d as f64).sqrt();
    let bc_shape = if cfg.selective { [d, n] } else { [1, n] };
    let bc_scale = if cfg.selective { scale } else { 1.0 / (n as f64).sqrt() };
    Ok(SsmParams {
        a_log: Tensor::parameter(a_log, &[d, n])?,
        w_delta: gaussian(rng, &[d, d], 0.1 * scale)?,
        delta_bias: Tensor::parameter(delta_bias, &[1, d])?,
        w_b: gaussian(rng, &bc_shape, bc_scale)?,
        w_c: gaussian(rng, &bc_shape, bc_scale)?,
    })
}

impl EncoderParams {
    pub fn init(config: &ModelConfig, rng: &mut RngState) -> Result<EncoderParams> {
        config.validate()?;
        let (c, d, k) = (config.channels, config.latent_dim, config.num_classes);
        let scale = 1.0 / (d as f64).sqrt();
        let input_proj = gaussian(rng, &[c, d], 1.0 / (c as f64).sqrt())?;
        let time_proj = gaussian(rng, &[config.time_embed_dim, d], 1.0 / (config.time_embed_dim as f64).sqrt())?;
        let mut blocks = Vec::with_capacity(config.num_blocks);
        for _ in 0..config.num_blocks {
            blocks.push(BlockParams {
                norm_gamma: constant(&[d], 1.0)?,
                norm_beta: constant(&[d], 0.0)?,
                ssm_fwd: init_ssm(config, rng)?,
                ssm_bwd: init_ssm(config, rng)?,
                gate: gaussian(rng, &[d, d], scale)?,
                attn: AttentionParams {
                    w_q: gaussian(rng, &[d, d], scale)?,
                    w_k: gaussian(rng, &[d, d], scale)?,
                    w_v: gaussian(rng, &[d, d], scale)?,
                    log_tau: constant(&[1], (config.window_len as f64).sqrt().ln())?,
                },
                fusion: gaussian(rng, &[d, 2], 0.1 * scale)?,
            });
        }
        let mut params = EncoderParams {
            config: config.clone(),
            input_proj,
            time_proj,
            blocks,
            final_gamma: constant(&[d], 1.0)?,
            final_beta: constant(&[d], 0.0)?,
            head_w: gaussian(rng, &[d, k], scale)?,
            head_b: constant(&[1, k], 0.0)?,
        };
        params.round_to_f32()?;
        Ok(params)
    }

    /// Rounds every value to the nearest f32 so checkpoints are lossless.
    pub fn round_to_f32(&mut self) -> Result<()> {
        for (_, slot) in self.named_mut() {
            let data = slot.data().iter().map(|&v| v as f32 as f64).collect();
            *slot = Tensor::parameter(data, &slot.shape().to_vec())?;
        }
        Ok(())
    }

    /// Stable (name, tensor) listing; checkpoint and optimizer order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.input_proj".into(), &self.input_proj),
            ("embed.time_proj".into(), &self.time_proj),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("block{i}.{s}");
            out.push((p("norm.gamma"), &b.norm_gamma));
            out.push((p("norm.beta"), &b.norm_beta));
            for (dir, s) in [("ssm_fwd", &b.ssm_fwd), ("ssm_bwd", &b.ssm_bwd)] {
                out.push((p(&format!("{dir}.a_log")), &s.a_log));
                out.push((p(&format!("{dir}.w_delta")), &s.w_delta));
                out.push((p(&format!("{dir}.delta_bias")), &s.delta_bias));
                out.push((p(&format!("{dir}.w_b")), &s.w_b));
                out.push((p(&format!("{dir}.w_c")), &s.w_c));
            }
            out.push((p("gate"), &b.gate));
            out.push((p("attn.w_q"), &b.attn.w_q));
            out.push((p("attn.w_k"), &b.attn.w_k));
            out.push((p("attn.w_v"), &b.attn.w_v));
            out.push((p("attn.log_tau"), &b.attn.log_tau));
            out.push((p("fusion"), &b.fusion));
        }
        out.push(("final_norm.gamma".into(), &self.final_gamma));
        out.push(("final_norm.beta".into(), &self.final_beta));
        out.push(("head.w".into(), &self.head_w));
        out.push(("head.b".into(), &self.head_b));
        out
    }

    /// Mutable counterpart of [`EncoderParams::named`], same order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed.input_proj".into(), &mut self.input_proj),
            ("embed.time_proj".into(), &mut self.time_proj),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = |s: &str| format!("block{i}.{s}");
            out.push((p("norm.gamma"), &mut b.norm_gamma));
            out.push((p("norm.beta"), &mut b.norm_beta));
            for (dir, s) in [("ssm_fwd", &mut b.ssm_fwd), ("ssm_bwd", &mut b.ssm_bwd)] {
                out.push((p(&format!("{dir}.a_log")), &mut s.a_log));
                out.push((p(&format!("{dir}.w_delta")), &mut s.w_delta));
                out.push((p(&format!("{dir}.delta_bias")), &mut s.delta_bias));
                out.push((p(&format!("{dir}.w_b")), &mut s.w_b));
                out.push((p(&format!("{dir}.w_c")), &mut s.w_c));
            }
            out.push((p("gate"), &mut b.gate));
            out.push((p("attn.w_q"), &mut b.attn.w_q));
            out.push((p("attn.w_k"), &mut b.attn.w_k));
            out.push((p("attn.w_v"), &mut b.attn.w_v));
            out.push((p("attn.log_tau"), &mut b.attn.log_tau));
            out.push((p("fusion"), &mut b.fusion));
        }
        out.push(("final_norm.gamma".into(), &mut self.final_gamma));
        out.push(("final_norm.beta".into(), &mut self.final_beta));
        out.push(("head.w".into(), &mut self.head_w));
        out.push(("head.b".into(), &mut self.head_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Copy with tensor `name` replaced by `value` (same shape).
    pub fn with_tensor(&self, name: &str, value: Tensor) -> Result<EncoderParams> {
        let mut out = self.clone();
        let mut slots = out.named_mut();
        let (_, slot) = slots
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::config(format!("unknown parameter '{name}'")))?;
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        **slot = value;
        drop(slots);
        Ok(out)
    }

    /// Overwrites values from a (name, data) listing, e.g. a loaded checkpoint.
    pub fn load_named(&mut self, values: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        for (name, slot) in self.named_mut() {
            let (_, shape, data) = values
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter '{name}'")))?;
            if slot.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter '{name}' has shape {:?} in checkpoint, expected {:?}",
                    shape,
                    slot.shape()
                )));
            }
            *slot = Tensor::parameter(data.clone(), shape)?;
        }
        Ok(())
    }
}
