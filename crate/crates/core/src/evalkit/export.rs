//! CSV exports of pooled embeddings, channel attention and fusion weights.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encode_all;
use crate::datasets::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::EncoderParams;
use crate::numerics::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportKind {
    /// `window_id,label,z0..z{D-1}` per window.
    Embeddings,
    /// Per-class mean attention map: `class,block,row,c0..c{D-1}`.
    Attention,
    /// `window_id,label,block,alpha,beta` per window and block.
    FusionWeights,
}

/// Clean inference pass over `data`, written as CSV to `path`.
pub fn export_arrays(params: &EncoderParams, data: &WindowedDataset, kind: ExportKind, path: &Path) -> Result<()> {
    let outputs = encode_all(params, data, None, &RngState::new(0))?;
    let d = params.config.latent_dim;
    let mut w = csv::Writer::from_path(path)?;
    match kind {
        ExportKind::Embeddings => {
            let mut header = vec!["window_id".to_string(), "label".to_string()];
            header.extend((0..d).map(|i| format!("z{i}")));
            w.write_record(&header)?;
            for (i, (win, out)) in data.windows.iter().zip(&outputs).enumerate() {
                let mut row = vec![i.to_string(), win.label.to_string()];
                row.extend(out.z_pooled.data().iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        ExportKind::Attention => {
            if !params.config.streams.spatial {
                return Err(Error::config("attention export needs the spatial stream"));
            }
            let blocks = params.blocks.len();
            let k = data.num_classes;
            let mut sums = vec![vec![0.0; d * d]; k * blocks];
            let mut counts = vec![0usize; k];
            for (win, out) in data.windows.iter().zip(&outputs) {
                counts[win.label] += 1;
                for (b, map) in out.attention_maps.iter().enumerate() {
                    let acc = &mut sums[win.label * blocks + b];
                    acc.iter_mut().zip(map.data()).for_each(|(a, v)| *a += v);
                }
            }
            let mut header = vec!["class".to_string(), "block".to_string(), "row".to_string()];
            header.extend((0..d).map(|i| format!("c{i}")));
            w.write_record(&header)?;
            for class in (0..k).filter(|&c| counts[c] > 0) {
                for b in 0..blocks {
                    let acc = &sums[class * blocks + b];
                    for r in 0..d {
                        let mut row = vec![class.to_string(), b.to_string(), r.to_string()];
                        row.extend(acc[r * d..(r + 1) * d].iter().map(|v| (v / counts[class] as f64).to_string()));
                        w.write_record(&row)?;
                    }
                }
            }
        }
        ExportKind::FusionWeights => {
            w.write_record(["window_id", "label", "block", "alpha", "beta"])?;
            for (i, (win, out)) in data.windows.iter().zip(&outputs).enumerate() {
                for (b, (alpha, beta)) in out.fusion_weights.iter().enumerate() {
                    w.write_record([i.to_string(), win.label.to_string(), b.to_string(), alpha.to_string(), beta.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}
