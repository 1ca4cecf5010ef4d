//! JSON persistence for windowed datasets.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SensorWindow, SplitTag, WindowMeta, WindowedDataset};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredWindow {
    label: usize,
    recording: String,
    start: usize,
    /// Row-major `window_len x num_channels` values.
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredDataset {
    split: SplitTag,
    num_classes: usize,
    window_len: usize,
    num_channels: usize,
    windows: Vec<StoredWindow>,
}

impl WindowedDataset {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let stored = StoredDataset {
            split: self.split_tag,
            num_classes: self.num_classes,
            window_len: self.window_len(),
            num_channels: self.num_channels(),
            windows: self
                .windows
                .iter()
                .map(|w| StoredWindow {
                    label: w.label,
                    recording: w.meta.recording.clone(),
                    start: w.meta.start,
                    values: w.x.to_vec(),
                })
                .collect(),
        };
        let f = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(f, &stored)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<WindowedDataset> {
        let f = BufReader::new(fs::File::open(path)?);
        let stored: StoredDataset = serde_json::from_reader(f)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let shape = [stored.window_len, stored.num_channels];
        let windows = stored
            .windows
            .into_iter()
            .map(|w| {
                Ok(SensorWindow {
                    x: Tensor::new(w.values, &shape)?,
                    label: w.label,
                    meta: WindowMeta {
                        recording: w.recording,
                        start: w.start,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        WindowedDataset::new(windows, stored.num_classes, stored.split)
    }
}
