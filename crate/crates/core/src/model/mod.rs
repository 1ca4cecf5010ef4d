//! Noise-aware dual-stream encoder and classification head.
//!
//! Each block normalizes its input, runs the bidirectional gated scan and
//! the channel attention in parallel, fuses them with learned convex
//! weights and adds the result back to the residual path.

mod params;
pub mod ssm;
mod streams;

pub use params::{AttentionParams, BlockParams, EncoderParams, ModelConfig, StreamToggles};
pub use ssm::{selective_scan, ssm_scan, ScanDirection, SsmParams};
pub use streams::{adaptive_fuse, embed, sinusoidal_embed, spatial_stream, temporal_stream};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, caller-supplied timestep.
    Train,
    /// No dropout, caller-supplied timestep.
    Eval,
    /// No dropout, configured inference timestep.
    Infer,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// L x D sequence after the last block and final norm.
    pub z_seq: Tensor,
    /// 1 x D time-averaged feature (before dropout).
    pub z_pooled: Tensor,
    /// 1 x num_classes.
    pub logits: Tensor,
    /// (α, β) per block.
    pub fusion_weights: Vec<(f64, f64)>,
    /// D x D channel attention per block; empty when the spatial stream is off.
    pub attention_maps: Vec<Tensor>,
}

fn dropout(x: &Tensor, p: f64, rng: &mut RngState) -> Result<Tensor> {
    if p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..x.numel())
        .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
        .collect();
    x.mask(&Tensor::new(mask, x.shape())?)
}

/// Runs one block on the residual stream `h`.
pub fn block_forward(
    h: &Tensor,
    block: &BlockParams,
    config: &ModelConfig,
) -> Result<(Tensor, (f64, f64), Option<Tensor>)> {
    let u = h.layer_norm(&block.norm_gamma, &block.norm_beta, config.layer_norm_eps)?;
    let streams = config.streams;
    let z_temp = streams
        .temporal
        .then(|| temporal_stream(&u, block, config.selective))
        .transpose()?;
    let (z_spatial, map) = match streams.spatial.then(|| spatial_stream(&u, &block.attn)).transpose()? {
        Some((z, m)) => (Some(z), Some(m)),
        None => (None, None),
    };
    let (fused, alpha, beta) = adaptive_fuse(z_temp.as_ref(), z_spatial.as_ref(), &block.fusion, streams)?;
    Ok((h.add(&fused)?, (alpha, beta), map))
}

/// Full encoder and head. In [`Mode::Infer`] the configured inference
/// timestep replaces `t`. Only [`Mode::Train`] consumes randomness.
pub fn forward(x: &Tensor, t: usize, params: &EncoderParams, mode: Mode, rng: &mut RngState) -> Result<EncoderOutput> {
    let cfg = &params.config;
    if x.shape() != [cfg.window_len, cfg.channels] {
        return Err(Error::shape(format!(
            "forward: input {:?}, model expects [{}, {}]",
            x.shape(),
            cfg.window_len,
            cfg.channels
        )));
    }
    let t = match mode {
        Mode::Train | Mode::Eval => t,
        Mode::Infer => cfg.inference_timestep(),
    };
    let mut h = embed(x, t, params)?;
    let mut fusion_weights = Vec::with_capacity(params.blocks.len());
    let mut attention_maps = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (next, weights, map) = block_forward(&h, block, cfg)?;
        h = next;
        fusion_weights.push(weights);
        attention_maps.extend(map);
    }
    let z_seq = h.layer_norm(&params.final_gamma, &params.final_beta, cfg.layer_norm_eps)?;
    let z_pooled = z_seq.mean_axis(0)?;
    let feature = match mode {
        Mode::Train => dropout(&z_pooled, cfg.dropout, rng)?,
        Mode::Eval | Mode::Infer => z_pooled.clone(),
    };
    let logits = feature.matmul(&params.head_w)?.add(&params.head_b)?;
    Ok(EncoderOutput {
        z_seq,
        z_pooled,
        logits,
        fusion_weights,
        attention_maps,
    })
}
