//! JSON run configuration with dotted-path overrides.
//!
//! Resolution order: built-in defaults, then the config file, then each
//! `key.path=value` override in the order given.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corruption::CorruptionConfig;
use crate::datasets::synth::{self, SynthConfig};
use crate::datasets::{load_many, prepare, CsvSchema, NormStats, WindowedDataset};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::RngState;
use crate::objectives::LossWeights;
use crate::trainer::{TrainConfig, TrainSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvDatasetConfig {
    /// Column schema JSON, relative paths resolved against the config file.
    pub schema: PathBuf,
    /// CSV recordings; each file is one subject.
    pub files: Vec<PathBuf>,
    pub window_len: usize,
    pub overlap: f64,
    pub train_frac: f64,
    pub split_seed: u64,
}

impl Default for CsvDatasetConfig {
    fn default() -> Self {
        CsvDatasetConfig {
            schema: PathBuf::new(),
            files: Vec::new(),
            window_len: 128,
            overlap: 0.5,
            train_frac: 0.7,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Built-in generator.
    Synth {
        #[serde(default)]
        synth: SynthConfig,
    },
    /// Raw CSV recordings, windowed and normalised on load.
    Csv {
        #[serde(default)]
        csv: CsvDatasetConfig,
    },
    /// Output directory of `mcstn preprocess`.
    Prepared { dir: PathBuf },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synth {
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub rho_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Noise intensity of the "noisy" score in sensitivity sweeps.
    pub noise_lambda: f64,
    pub t_grid: Vec<f64>,
    pub lambda_cons_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let grid = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5];
        EvalConfig {
            rho_grid: grid.clone(),
            lambda_grid: grid,
            seeds: vec![0, 1, 2],
            noise_lambda: 0.5,
            t_grid: vec![50.0, 100.0, 200.0, 500.0],
            lambda_cons_grid: vec![0.0, 0.1, 0.2, 0.5, 1.0],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub corruption: CorruptionConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Parses `a.b.c=value`. The value is read as JSON when it parses,
/// otherwise taken as a string.
pub fn parse_override(arg: &str) -> Result<(Vec<String>, Value)> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{arg}' is not key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::config(format!("override key '{key}' has an empty segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> Result<()> {
    let mut node = root;
    for (i, seg) in path.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override path '{}' crosses a non-object", path[..i].join("."))))?;
        if i + 1 == path.len() {
            obj.insert(seg.clone(), value);
            return Ok(());
        }
        node = obj.entry(seg.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

fn resolve_relative(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || p.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    /// Defaults, optionally overlaid by a JSON file, then by overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut value = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            let file: Value = serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", p.display())))?;
            // The dataset section is tagged; replace it whole so a file can switch source.
            merge(&mut value, file, true);
        }
        for o in overrides {
            let (key, v) = parse_override(o)?;
            set_path(&mut value, &key, v)?;
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(e.to_string()))?;
        if let Some(dir) = path.and_then(Path::parent) {
            cfg.resolve_paths(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        match &mut self.dataset {
            DatasetConfig::Csv { csv } => {
                csv.schema = resolve_relative(base, &csv.schema);
                for f in &mut csv.files {
                    *f = resolve_relative(base, f);
                }
            }
            DatasetConfig::Prepared { dir } => *dir = resolve_relative(base, dir),
            DatasetConfig::Synth { .. } => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corruption.physical.validate()?;
        self.corruption.diffusion.schedule()?;
        self.loss.validate()?;
        self.train.validate()?;
        if let DatasetConfig::Csv { csv } = &self.dataset {
            if !(0.0..1.0).contains(&csv.overlap) {
                return Err(Error::config(format!("dataset overlap {} outside [0, 1)", csv.overlap)));
            }
        }
        Ok(())
    }

    /// Loads or generates the train/test splits.
    pub fn load_datasets(&self) -> Result<(WindowedDataset, WindowedDataset, NormStats)> {
        match &self.dataset {
            DatasetConfig::Synth { synth } => synth::generate(synth),
            DatasetConfig::Csv { csv } => {
                let schema = CsvSchema::from_json_file(&csv.schema)?;
                let recordings = load_many(&csv.files, &schema)?;
                prepare(&recordings, csv.window_len, csv.overlap, csv.train_frac, &mut RngState::new(csv.split_seed))
            }
            DatasetConfig::Prepared { dir } => {
                let train = WindowedDataset::load_json(&dir.join("train.json"))?;
                let test = WindowedDataset::load_json(&dir.join("test.json"))?;
                let text = fs::read_to_string(dir.join("stats.json"))?;
                let stats = serde_json::from_str(&text).map_err(|e| Error::data(format!("stats.json: {e}")))?;
                Ok((train, test, stats))
            }
        }
    }

    /// Training setup with data-dependent model sizes filled in.
    pub fn setup_for(&self, train: &WindowedDataset) -> TrainSetup {
        let mut model = self.model.clone();
        model.window_len = train.window_len();
        model.channels = train.num_channels();
        model.num_classes = train.num_classes;
        TrainSetup {
            model,
            corruption: self.corruption.clone(),
            loss: self.loss,
            train: self.train.clone(),
        }
    }
}

/// Recursive object merge; `replace_tagged` swaps the `dataset` object whole.
fn merge(base: &mut Value, over: Value, replace_tagged: bool) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                if replace_tagged && k == "dataset" {
                    b.insert(k, v);
                    continue;
                }
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, false),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.train.lr, 5e-4);
        assert_eq!(cfg.corruption.diffusion.steps, 200);
        assert_eq!(cfg.loss.lambda_cons, 0.2);
    }

    #[test]
    fn overrides_apply_in_order_after_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(&p, r#"{"train": {"epochs": 7, "lr": 0.001}, "model": {"latent_dim": 16}}"#).unwrap();
        let cfg = RunConfig::load(
            Some(&p),
            &["train.epochs=9".into(), "train.epochs=11".into(), "loss.lambda_cons=0".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 11);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.model.latent_dim, 16);
        assert_eq!(cfg.model.state_dim, 16);
        assert_eq!(cfg.loss.lambda_cons, 0.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::load(None, &["train.epoch=3".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::load(None, &["nonsense".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_source_switch_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.json");
        fs::write(
            &p,
            r#"{"dataset": {"source": "csv", "csv": {"schema": "s.json", "files": ["a.csv"], "window_len": 30}}}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(Some(&p), &[]).unwrap();
        match cfg.dataset {
            DatasetConfig::Csv { csv } => {
                assert_eq!(csv.schema, dir.path().join("s.json"));
                assert_eq!(csv.files, vec![dir.path().join("a.csv")]);
                assert_eq!(csv.window_len, 30);
                assert_eq!(csv.overlap, 0.5);
            }
            other => panic!("unexpected dataset {other:?}"),
        }
    }

    #[test]
    fn string_values_fall_back_to_strings() {
        let (path, v) = parse_override("dataset.dir=out/prep").unwrap();
        assert_eq!(path, vec!["dataset", "dir"]);
        assert_eq!(v, Value::String("out/prep".into()));
        let (_, v) = parse_override("train.seed=12").unwrap();
        assert_eq!(v, Value::from(12));
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(RunConfig::load(None, &["train.batch_size=0".into()]).is_err());
        assert!(RunConfig::load(None, &["corruption.physical.mask_rate=1.5".into()]).is_err());
    }
}
