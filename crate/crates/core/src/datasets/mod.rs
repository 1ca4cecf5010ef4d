//! Sensor recordings, normalisation, windowing and train/test splits.

mod csv_source;
mod store;
pub mod synth;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

pub use csv_source::{load_csv, load_many, CsvSchema};

/// Floor applied to the std of a channel with no variance.
pub const STD_FLOOR: f64 = 1e-6;

/// One continuous multichannel stream with per-timestep labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub channel_names: Vec<String>,
    /// `channels[c][k]` is channel `c` at timestep `k`.
    pub channels: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub subject_id: String,
    pub sample_rate_hz: f64,
    pub num_classes: usize,
}

impl RawRecording {
    pub fn new(
        channel_names: Vec<String>,
        channels: Vec<Vec<f64>>,
        labels: Vec<usize>,
        subject_id: impl Into<String>,
        sample_rate_hz: f64,
        num_classes: usize,
    ) -> Result<Self> {
        if channel_names.len() != channels.len() {
            return Err(Error::shape(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                channels.len()
            )));
        }
        if channels.iter().any(|c| c.len() != labels.len()) {
            return Err(Error::shape("channel streams and labels differ in length"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::data(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(RawRecording {
            channel_names,
            channels,
            labels,
            subject_id: subject_id.into(),
            sample_rate_hz,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Per-channel mean and population std.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Stats from per-channel sample iterators; shared by the recording and
    /// window entry points.
    fn from_columns(columns: Vec<Vec<f64>>) -> Result<NormStats> {
        let mut mean = Vec::with_capacity(columns.len());
        let mut std = Vec::with_capacity(columns.len());
        for (c, col) in columns.iter().enumerate() {
            if col.len() < 2 {
                return Err(Error::data(format!(
                    "channel {c} has {} samples, need at least 2",
                    col.len()
                )));
            }
            let n = col.len() as f64;
            let m = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let mut s = var.sqrt();
            if s < STD_FLOOR {
                warn!("channel {c} has zero variance; clamping std to {STD_FLOOR}");
                s = STD_FLOOR;
            }
            mean.push(m);
            std.push(s);
        }
        Ok(NormStats { mean, std })
    }

    /// Stats over the samples of every window (rows of each `x`).
    pub fn fit_windows(windows: &[SensorWindow]) -> Result<NormStats> {
        let first = windows.first().ok_or_else(|| Error::data("no training windows"))?;
        let c = first.x.dim(1);
        let mut columns = vec![Vec::new(); c];
        for w in windows {
            if w.x.dim(1) != c {
                return Err(Error::shape("windows disagree on channel count"));
            }
            for row in w.x.data().chunks(c) {
                for (col, &v) in columns.iter_mut().zip(row) {
                    col.push(v);
                }
            }
        }
        NormStats::from_columns(columns)
    }

    /// Normalises the values of every window in place of a copy.
    pub fn apply_windows(&self, windows: &[SensorWindow]) -> Result<Vec<SensorWindow>> {
        windows
            .iter()
            .map(|w| {
                let c = w.x.dim(1);
                if c != self.mean.len() {
                    return Err(Error::shape(format!(
                        "window has {c} channels, stats have {}",
                        self.mean.len()
                    )));
                }
                let data = w
                    .x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| (v - self.mean[i % c]) / self.std[i % c])
                    .collect();
                Ok(SensorWindow {
                    x: Tensor::new(data, w.x.shape())?,
                    label: w.label,
                    meta: w.meta.clone(),
                })
            })
            .collect()
    }
}

/// Per-channel statistics over all concatenated training samples.
pub fn fit_zscore(train: &[RawRecording]) -> Result<NormStats> {
    let first = train.first().ok_or_else(|| Error::data("no training recordings"))?;
    let c = first.num_channels();
    let mut columns = vec![Vec::new(); c];
    for rec in train {
        if rec.num_channels() != c {
            return Err(Error::shape("recordings disagree on channel count"));
        }
        for (col, stream) in columns.iter_mut().zip(&rec.channels) {
            col.extend_from_slice(stream);
        }
    }
    NormStats::from_columns(columns)
}

/// v -> (v - mean_c) / std_c on every channel.
pub fn apply_zscore(rec: &RawRecording, stats: &NormStats) -> Result<RawRecording> {
    if rec.num_channels() != stats.mean.len() || stats.mean.len() != stats.std.len() {
        return Err(Error::shape(format!(
            "recording has {} channels, stats have {}",
            rec.num_channels(),
            stats.mean.len()
        )));
    }
    let channels = rec
        .channels
        .iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .map(|(stream, (&m, &s))| stream.iter().map(|v| (v - m) / s).collect())
        .collect();
    Ok(RawRecording {
        channels,
        ..rec.clone()
    })
}

/// Where a window came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub recording: String,
    pub start: usize,
}

/// A fixed-length `L x C` segment with its activity label.
#[derive(Clone, Debug)]
pub struct SensorWindow {
    pub x: Tensor,
    pub label: usize,
    pub meta: WindowMeta,
}

/// Hop between window starts for a given overlap fraction.
pub fn window_stride(len: usize, overlap: f64) -> usize {
    ((len as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Majority label of a slice; ties go to the lowest class id.
fn majority_label(labels: &[usize], num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let mut best = 0;
    for (k, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = k;
        }
    }
    best
}

/// Segments `rec` into windows of `len` timesteps starting every
/// `window_stride(len, overlap)` steps; the trailing partial window is dropped.
pub fn window(rec: &RawRecording, len: usize, overlap: f64) -> Result<Vec<SensorWindow>> {
    if len < 2 {
        return Err(Error::config(format!("window length {len} < 2")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::config(format!("overlap {overlap} outside [0, 1)")));
    }
    if rec.len() < len {
        return Err(Error::data(format!(
            "recording '{}' has {} samples, shorter than window {len}",
            rec.subject_id,
            rec.len()
        )));
    }
    let stride = window_stride(len, overlap);
    let c = rec.num_channels();
    let mut out = Vec::with_capacity((rec.len() - len) / stride + 1);
    let mut start = 0;
    while start + len <= rec.len() {
        let mut data = Vec::with_capacity(len * c);
        for k in start..start + len {
            data.extend(rec.channels.iter().map(|ch| ch[k]));
        }
        out.push(SensorWindow {
            x: Tensor::new(data, &[len, c])?,
            label: majority_label(&rec.labels[start..start + len], rec.num_classes),
            meta: WindowMeta {
                recording: rec.subject_id.clone(),
                start,
            },
        });
        start += stride;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

/// Labelled windows of one split.
#[derive(Clone, Debug)]
pub struct WindowedDataset {
    pub windows: Vec<SensorWindow>,
    pub num_classes: usize,
    pub split_tag: SplitTag,
}

impl WindowedDataset {
    pub fn new(windows: Vec<SensorWindow>, num_classes: usize, split_tag: SplitTag) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::data(format!("{split_tag:?} split is empty")))?;
        let shape = first.x.shape().to_vec();
        for w in &windows {
            if w.label >= num_classes {
                return Err(Error::data(format!(
                    "label {} outside [0, {num_classes})",
                    w.label
                )));
            }
            if w.x.shape() != shape {
                return Err(Error::shape("windows disagree on shape"));
            }
        }
        Ok(WindowedDataset {
            windows,
            num_classes,
            split_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.windows[0].x.dim(0)
    }

    pub fn num_channels(&self) -> usize {
        self.windows[0].x.dim(1)
    }

    /// Window count per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for w in &self.windows {
            counts[w.label] += 1;
        }
        counts
    }
}

/// Deterministic shuffled split; `round(n * train_frac)` windows go to train.
pub fn split(
    windows: &[SensorWindow],
    train_frac: f64,
    num_classes: usize,
    rng: &mut RngState,
) -> Result<(WindowedDataset, WindowedDataset)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::config(format!("train fraction {train_frac} outside (0, 1)")));
    }
    let mut idx: Vec<usize> = (0..windows.len()).collect();
    rng.shuffle(&mut idx);
    let n_train = (windows.len() as f64 * train_frac).round() as usize;
    if n_train == 0 || n_train == windows.len() {
        return Err(Error::data(format!(
            "split of {} windows at {train_frac} leaves one side empty",
            windows.len()
        )));
    }
    let pick = |ids: &[usize]| ids.iter().map(|&i| windows[i].clone()).collect::<Vec<_>>();
    Ok((
        WindowedDataset::new(pick(&idx[..n_train]), num_classes, SplitTag::Train)?,
        WindowedDataset::new(pick(&idx[n_train..]), num_classes, SplitTag::Test)?,
    ))
}

/// Windows every recording, then hands off to [`prepare_windows`].
pub fn prepare(
    recordings: &[RawRecording],
    window_len: usize,
    overlap: f64,
    train_frac: f64,
    rng: &mut RngState,
) -> Result<(WindowedDataset, WindowedDataset, NormStats)> {
    let first = recordings.first().ok_or_else(|| Error::data("no recordings"))?;
    let num_classes = first.num_classes;
    let mut windows = Vec::new();
    for rec in recordings {
        if rec.num_classes != num_classes {
            return Err(Error::data("recordings disagree on class count"));
        }
        windows.extend(window(rec, window_len, overlap)?);
    }
    prepare_windows(&windows, train_frac, num_classes, rng)
}

/// Splits raw windows, fits z-score statistics on the training side only and
/// applies them to both sides.
pub fn prepare_windows(
    windows: &[SensorWindow],
    train_frac: f64,
    num_classes: usize,
    rng: &mut RngState,
) -> Result<(WindowedDataset, WindowedDataset, NormStats)> {
    let (train, test) = split(windows, train_frac, num_classes, rng)?;
    let stats = NormStats::fit_windows(&train.windows)?;
    let train = WindowedDataset::new(stats.apply_windows(&train.windows)?, num_classes, SplitTag::Train)?;
    let test = WindowedDataset::new(stats.apply_windows(&test.windows)?, num_classes, SplitTag::Test)?;
    Ok((train, test, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(values: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> RawRecording {
        let names = (0..values.len()).map(|c| format!("c{c}")).collect();
        RawRecording::new(names, values, labels, "r", 50.0, k).unwrap()
    }

    #[test]
    fn zscore_of_one_two_three() {
        let r = rec(vec![vec![1.0, 2.0, 3.0]], vec![0, 0, 0], 1);
        let s = fit_zscore(std::slice::from_ref(&r)).unwrap();
        assert!((s.mean[0] - 2.0).abs() < 1e-12);
        assert!((s.std[0] - 0.816_496_580_927_726).abs() < 1e-12);
        let z = apply_zscore(&r, &s).unwrap();
        let expect = [-1.224_744_871_391_589, 0.0, 1.224_744_871_391_589];
        for (a, b) in z.channels[0].iter().zip(expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_channel_std_is_clamped() {
        let r = rec(vec![vec![5.0, 5.0, 5.0]], vec![0, 0, 0], 1);
        let s = fit_zscore(&[r]).unwrap();
        assert_eq!(s.mean[0], 5.0);
        assert_eq!(s.std[0], STD_FLOOR);
    }

    #[test]
    fn two_recordings_pool_samples() {
        let a = rec(vec![vec![0.0]], vec![0], 1);
        let b = rec(vec![vec![2.0]], vec![0], 1);
        let s = fit_zscore(&[a, b]).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn identity_stats_and_mismatch() {
        let r = rec(vec![vec![1.0, -3.0], vec![2.0, 4.0]], vec![0, 0], 1);
        let id = NormStats { mean: vec![0.0, 0.0], std: vec![1.0, 1.0] };
        assert_eq!(apply_zscore(&r, &id).unwrap(), r);
        let bad = NormStats { mean: vec![0.0], std: vec![1.0] };
        assert!(matches!(apply_zscore(&r, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn too_few_samples_is_data_error() {
        let r = rec(vec![vec![1.0]], vec![0], 1);
        assert!(matches!(fit_zscore(&[r]), Err(Error::Data(_))));
    }

    #[test]
    fn window_starts_with_half_overlap() {
        let r = rec(vec![(0..10).map(f64::from).collect()], vec![0; 10], 1);
        let ws = window(&r, 4, 0.5).unwrap();
        let starts: Vec<usize> = ws.iter().map(|w| w.meta.start).collect();
        assert_eq!(starts, vec![0, 2, 4, 6]);
        assert_eq!(ws[1].x.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn zero_overlap_tiles() {
        let r = rec(vec![(0..12).map(f64::from).collect()], vec![0; 12], 1);
        let starts: Vec<usize> = window(&r, 4, 0.0).unwrap().iter().map(|w| w.meta.start).collect();
        assert_eq!(starts, vec![0, 4, 8]);
    }

    #[test]
    fn short_recording_is_data_error() {
        let r = rec(vec![vec![0.0; 3]], vec![0; 3], 1);
        assert!(matches!(window(&r, 4, 0.5), Err(Error::Data(_))));
    }

    #[test]
    fn majority_label_breaks_ties_low() {
        assert_eq!(majority_label(&[2, 2, 1, 1], 3), 1);
        assert_eq!(majority_label(&[0, 2, 2, 1], 3), 2);
        let r = rec(vec![vec![0.0; 4]], vec![1, 1, 0, 0], 2);
        assert_eq!(window(&r, 4, 0.0).unwrap()[0].label, 0);
    }

    fn toy_windows(n: usize) -> Vec<SensorWindow> {
        (0..n)
            .map(|i| SensorWindow {
                x: Tensor::new(vec![i as f64, 1.0, 2.0, i as f64 * 0.5], &[2, 2]).unwrap(),
                label: i % 2,
                meta: WindowMeta { recording: "r".into(), start: i },
            })
            .collect()
    }

    #[test]
    fn seventy_thirty_split() {
        let ws = toy_windows(10);
        let (tr, te) = split(&ws, 0.7, 2, &mut RngState::new(1)).unwrap();
        assert_eq!((tr.len(), te.len()), (7, 3));
        let (tr2, _) = split(&ws, 0.7, 2, &mut RngState::new(1)).unwrap();
        let a: Vec<usize> = tr.windows.iter().map(|w| w.meta.start).collect();
        let b: Vec<usize> = tr2.windows.iter().map(|w| w.meta.start).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn single_window_split_fails() {
        let ws = toy_windows(1);
        assert!(matches!(split(&ws, 0.7, 2, &mut RngState::new(1)), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn window_count_formula(n in 2usize..300, len in 2usize..40, overlap in 0.0f64..0.95) {
            prop_assume!(n >= len);
            let r = rec(vec![vec![0.0; n]], vec![0; n], 1);
            let stride = window_stride(len, overlap);
            let ws = window(&r, len, overlap).unwrap();
            prop_assert_eq!(ws.len(), (n - len) / stride + 1);
        }

        #[test]
        fn normalised_moments(values in proptest::collection::vec(-50.0f64..50.0, 4..200)) {
            let r = rec(vec![values.clone()], vec![0; values.len()], 1);
            let s = fit_zscore(std::slice::from_ref(&r)).unwrap();
            prop_assume!(s.std[0] > 1e-3);
            let z = apply_zscore(&r, &s).unwrap();
            let n = values.len() as f64;
            let m = z.channels[0].iter().sum::<f64>() / n;
            let sd = (z.channels[0].iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((sd - 1.0).abs() < 1e-4);
        }

        #[test]
        fn test_rows_never_reach_stats(seed in 0u64..1000, bump in -100.0f64..100.0) {
            let ws = toy_windows(20);
            let (_, te, stats) = prepare_windows(&ws, 0.7, 2, &mut RngState::new(seed)).unwrap();
            let test_ids: Vec<usize> = te.windows.iter().map(|w| w.meta.start).collect();
            let perturbed: Vec<SensorWindow> = ws.iter().map(|w| {
                if test_ids.contains(&w.meta.start) {
                    SensorWindow {
                        x: Tensor::new(w.x.data().iter().map(|v| v * 3.0 + bump).collect(), w.x.shape()).unwrap(),
                        ..w.clone()
                    }
                } else {
                    w.clone()
                }
            }).collect();
            let (_, _, again) = prepare_windows(&perturbed, 0.7, 2, &mut RngState::new(seed)).unwrap();
            prop_assert_eq!(stats, again);
        }
    }
}
