use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RawRecording;
use crate::error::{Error, Result};

/// Column roles for a CSV recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    #[serde(default)]
    pub name: Option<String>,
    pub label_column: String,
    /// Channel columns, in model input order.
    pub channels: Vec<String>,
    /// Raw label text -> class id. When present, rows whose label is not a
    /// key are dropped; this is how NULL/transient classes are filtered.
    #[serde(default)]
    pub label_map: Option<BTreeMap<String, usize>>,
    /// Number of classes; inferred from `label_map` or the largest label.
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default = "default_rate")]
    pub sample_rate_hz: f64,
    /// Keep one row in every `row_stride` (upstream rate reduction hint).
    #[serde(default = "default_stride")]
    pub row_stride: usize,
}

fn default_rate() -> f64 {
    50.0
}

fn default_stride() -> usize {
    1
}

impl CsvSchema {
    pub fn from_json_file(path: &Path) -> Result<CsvSchema> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
    }

    fn class_of(&self, raw: &str) -> Result<Option<usize>> {
        let raw = raw.trim();
        if let Some(map) = &self.label_map {
            return Ok(map.get(raw).copied());
        }
        let v: f64 = raw
            .parse()
            .map_err(|_| Error::data(format!("unparseable label '{raw}'")))?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::data(format!("label '{raw}' is not a class id")));
        }
        Ok(Some(v as usize))
    }
}

/// Parses one recording. Unparseable or NaN channel cells are forward-filled
/// from the previous row of the same channel (0 on the first row).
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<RawRecording> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column '{name}'", path.display())))
    };
    let label_idx = col(&schema.label_column)?;
    let channel_idx = schema
        .channels
        .iter()
        .map(|c| col(c))
        .collect::<Result<Vec<_>>>()?;
    if channel_idx.is_empty() {
        return Err(Error::Schema("schema declares no channels".into()));
    }

    let stride = schema.row_stride.max(1);
    let mut channels = vec![Vec::new(); channel_idx.len()];
    let mut last = vec![0.0; channel_idx.len()];
    let mut labels = Vec::new();
    for (row_no, record) in reader.records().enumerate() {
        let record = record?;
        // Forward-fill state advances on every row, kept or not.
        let mut values = Vec::with_capacity(channel_idx.len());
        for (c, &i) in channel_idx.iter().enumerate() {
            let v = record
                .get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .unwrap_or(last[c]);
            last[c] = v;
            values.push(v);
        }
        if row_no % stride != 0 {
            continue;
        }
        let raw_label = record.get(label_idx).unwrap_or("");
        let class = schema
            .class_of(raw_label)
            .map_err(|e| Error::data(format!("{} row {}: {e}", path.display(), row_no + 2)))?;
        let Some(class) = class else { continue };
        labels.push(class);
        for (stream, v) in channels.iter_mut().zip(values) {
            stream.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    let num_classes = schema
        .num_classes
        .or_else(|| schema.label_map.as_ref().map(|m| m.values().max().map_or(0, |v| v + 1)))
        .unwrap_or_else(|| labels.iter().max().map_or(0, |v| v + 1));
    let subject = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    RawRecording::new(
        schema.channels.clone(),
        channels,
        labels,
        subject,
        schema.sample_rate_hz / stride as f64,
        num_classes,
    )
}

/// Loads several recordings; the result is ordered by path regardless of the
/// order given.
pub fn load_many(paths: &[PathBuf], schema: &CsvSchema) -> Result<Vec<RawRecording>> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    sorted.iter().map(|p| load_csv(p, schema)).collect()
}
