//! Embedding, the temporal and spatial streams, and their fusion.

use super::params::{AttentionParams, BlockParams, EncoderParams, StreamToggles};
use super::ssm::{ssm_scan, ScanDirection};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Standard transformer sinusoid code of a scalar timestep, width `dim`.
pub fn sinusoidal_embed(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

/// `x W_in + e(t) W_t`, the timestep row repeated over time.
pub fn embed(x: &Tensor, t: usize, params: &EncoderParams) -> Result<Tensor> {
    let cfg = &params.config;
    if x.ndim() != 2 || x.dim(1) != params.input_proj.dim(0) {
        return Err(Error::shape(format!(
            "embed: input {:?} does not match input projection {:?}",
            x.shape(),
            params.input_proj.shape()
        )));
    }
    let code = Tensor::new(sinusoidal_embed(t, cfg.time_embed_dim), &[1, cfg.time_embed_dim])?;
    let time_row = code.matmul(&params.time_proj)?;
    x.matmul(&params.input_proj)?.add(&time_row.expand(0, x.dim(0))?)
}

/// Bidirectional scan sum gated by `SiLU(x W_g)`.
pub fn temporal_stream(x: &Tensor, block: &BlockParams, selective: bool) -> Result<Tensor> {
    let fwd = ssm_scan(x, &block.ssm_fwd, ScanDirection::Fwd, selective)?;
    let bwd = ssm_scan(x, &block.ssm_bwd, ScanDirection::Bwd, selective)?;
    fwd.add(&bwd)?.mul(&x.matmul(&block.gate)?.silu()?)
}

/// Channel-axis attention. Returns the residual output and the D x D map.
pub fn spatial_stream(x: &Tensor, attn: &AttentionParams) -> Result<(Tensor, Tensor)> {
    let q = x.matmul(&attn.w_q)?;
    let k = x.matmul(&attn.w_k)?;
    let v = x.matmul(&attn.w_v)?;
    let inv_tau = attn.log_tau.neg()?.exp()?;
    let scores = q.transpose()?.matmul(&k)?.mul(&inv_tau)?;
    let map = scores.softmax(1)?;
    let out = x.add(&map.matmul(&v.transpose()?)?.transpose()?)?;
    Ok((out, map))
}

/// Convex combination of the two streams. Disabled streams are given
/// weight zero; with adaptive fusion off the weights are fixed at 1/2.
pub fn adaptive_fuse(
    z_temp: Option<&Tensor>,
    z_spatial: Option<&Tensor>,
    w_f: &Tensor,
    streams: StreamToggles,
) -> Result<(Tensor, f64, f64)> {
    match (z_temp, z_spatial) {
        (Some(zt), Some(zs)) => {
            if zt.shape() != zs.shape() {
                return Err(Error::shape(format!(
                    "adaptive_fuse: {:?} vs {:?}",
                    zt.shape(),
                    zs.shape()
                )));
            }
            let weights = if streams.adaptive_fusion {
                zt.add(zs)?.mean_axis(0)?.matmul(w_f)?.softmax(1)?
            } else {
                Tensor::new(vec![0.5, 0.5], &[1, 2])?
            };
            let len = zt.dim(0);
            let alpha = weights.slice(1, 0, 1)?;
            let beta = weights.slice(1, 1, 2)?;
            let d = zt.dim(1);
            let fused = zt
                .mul(&alpha.expand(1, d)?.expand(0, len)?)?
                .add(&zs.mul(&beta.expand(1, d)?.expand(0, len)?)?)?;
            let w = weights.data();
            Ok((fused, w[0], w[1]))
        }
        (Some(zt), None) => Ok((zt.clone(), 1.0, 0.0)),
        (None, Some(zs)) => Ok((zs.clone(), 0.0, 1.0)),
        (None, None) => Err(Error::config("adaptive_fuse: both streams disabled")),
    }
}
