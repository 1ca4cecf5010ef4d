//! `mcstn`: command-line front end for the training and evaluation pipeline.
//!
//! Every command accepts `--config`, repeated `--set key.path=value` and
//! free-standing dotted flags such as `--loss.lambda_cons 0.2`. Events are
//! written to stdout as one JSON object per line; artifacts go to `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use mcstn::config::{DatasetConfig, RunConfig};
use mcstn::corruption::EvalCorruptionSpec;
use mcstn::datasets::synth;
use mcstn::evalkit::{self, ExportKind, SensitivityAxis, SweepAxis};
use mcstn::numerics::RngState;
use mcstn::trainer::{self, FitOptions, TrainerState};
use mcstn::Error;

#[derive(Parser)]
#[command(name = "mcstn", version, about = "Robust wearable-sensor window classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key.path=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory produced by `preprocess` or `synth`; replaces the dataset section.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Window, split and normalise CSV recordings into a prepared directory.
    Preprocess(Common),
    /// Generate the built-in synthetic task as a prepared directory.
    Synth(Common),
    /// Train from scratch, or continue from `--resume`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to continue from. Its stored setup is kept; only
        /// `train.epochs` is taken from the config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split, optionally corrupted.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Missing-timestep ratio.
        #[arg(long, conflicts_with = "lambda")]
        rho: Option<f64>,
        /// Additive noise intensity.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Robustness sweep of a checkpoint over the configured grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        axis: SweepArg,
    },
    /// Retrain over a hyperparameter grid and record clean/noisy F1 and epoch time.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: SensitivityArg,
    },
    /// Write embeddings, attention maps or fusion weights as CSV.
    Export {
        #[command(flatten)]
        common: Common,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: ExportArg,
    },
    /// Finite-difference check of the full loss on toy shapes.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Rho,
    Lambda,
}

#[derive(Clone, Copy, ValueEnum)]
enum SensitivityArg {
    T,
    LambdaCons,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportArg {
    Embeddings,
    Attention,
    FusionWeights,
}

enum Failure {
    Lib(Error),
    GradCheck,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Schema(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric(_) => 4,
        Error::Shape(_) | Error::Contract(_) => 1,
    }
}

fn emit(event: &str, body: Value) {
    let mut obj = json!({ "event": event });
    if let (Value::Object(o), Value::Object(b)) = (&mut obj, body) {
        o.extend(b);
    }
    println!("{obj}");
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of argv; a dotted flag
/// name is never a real option, so these become config overrides.
fn split_dotted_flags(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter().peekable();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let key = flag.split('=').next().unwrap_or_default();
        if !key.contains('.') {
            rest.push(arg);
            continue;
        }
        if flag.contains('=') {
            overrides.push(flag.to_string());
        } else if let Some(v) = it.next() {
            overrides.push(format!("{key}={v}"));
        } else {
            overrides.push(format!("{key}="));
        }
    }
    (rest, overrides)
}

fn load_config(common: &Common, dotted: &[String]) -> Result<RunConfig, Error> {
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(dotted);
    if let Some(seed) = common.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(dir) = &common.data {
        cfg.dataset = DatasetConfig::Prepared { dir: dir.clone() };
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<Option<PathBuf>, Error> {
    if let Some(d) = &common.out {
        fs::create_dir_all(d)?;
    }
    Ok(common.out.clone())
}

fn require_out(common: &Common, cmd: &str) -> Result<PathBuf, Error> {
    out_dir(common)?.ok_or_else(|| Error::Config(format!("{cmd} needs --out")))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Error> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn write_prepared(dir: &Path, parts: (mcstn::datasets::WindowedDataset, mcstn::datasets::WindowedDataset, mcstn::datasets::NormStats)) -> Result<(), Error> {
    let (train, test, stats) = parts;
    train.save_json(&dir.join("train.json"))?;
    test.save_json(&dir.join("test.json"))?;
    write_json(&dir.join("stats.json"), &stats)?;
    emit(
        "dataset",
        json!({
            "dir": dir,
            "train_windows": train.len(),
            "test_windows": test.len(),
            "window_len": train.window_len(),
            "channels": train.num_channels(),
            "num_classes": train.num_classes,
            "train_class_counts": train.class_counts(),
        }),
    );
    Ok(())
}

fn run(command: Command, dotted: &[String]) -> Result<(), Failure> {
    match command {
        Command::Preprocess(common) => {
            let cfg = load_config(&common, dotted)?;
            let dir = require_out(&common, "preprocess")?;
            write_prepared(&dir, cfg.load_datasets()?)?;
        }
        Command::Synth(common) => {
            let cfg = load_config(&common, dotted)?;
            let dir = require_out(&common, "synth")?;
            let synth_cfg = match &cfg.dataset {
                DatasetConfig::Synth { synth } => synth.clone(),
                _ => Default::default(),
            };
            write_prepared(&dir, synth::generate(&synth_cfg)?)?;
        }
        Command::Train { common, resume } => train(&common, dotted, resume.as_deref())?,
        Command::Eval { common, checkpoint, rho, lambda } => {
            let cfg = load_config(&common, dotted)?;
            let (_, test, _) = cfg.load_datasets()?;
            let state = TrainerState::load(&checkpoint)?;
            let spec = match (rho, lambda) {
                (Some(rho), _) => Some(EvalCorruptionSpec::Missing { rho }),
                (_, Some(lambda)) => Some(EvalCorruptionSpec::Noise { lambda }),
                _ => None,
            };
            let report = evalkit::evaluate(&state.params, &test, spec.as_ref(), &RngState::new(cfg.train.seed))?;
            if let Some(dir) = out_dir(&common)? {
                write_json(&dir.join("eval.json"), &report)?;
            }
            emit("metrics", json!({ "checkpoint": checkpoint, "corruption": spec, "report": report }));
        }
        Command::Sweep { common, checkpoint, axis } => {
            let cfg = load_config(&common, dotted)?;
            let (_, test, _) = cfg.load_datasets()?;
            let params = TrainerState::load(&checkpoint)?.params;
            let (axis, grid) = match axis {
                SweepArg::Rho => (SweepAxis::Rho, &cfg.eval.rho_grid),
                SweepArg::Lambda => (SweepAxis::Lambda, &cfg.eval.lambda_grid),
            };
            let result = evalkit::sweep(&params, &test, axis, grid, &cfg.eval.seeds)?;
            for (value, mean, std) in result.summary() {
                emit("sweep_point", json!({ "axis": axis.name(), "value": value, "macro_f1_mean": mean, "macro_f1_std": std }));
            }
            if let Some(dir) = out_dir(&common)? {
                result.write_csv(&dir.join(format!("sweep_{}.csv", axis.name())))?;
            }
        }
        Command::Sensitivity { common, axis } => {
            let cfg = load_config(&common, dotted)?;
            let (train, test, _) = cfg.load_datasets()?;
            let setup = cfg.setup_for(&train);
            let (axis, grid) = match axis {
                SensitivityArg::T => (SensitivityAxis::T, &cfg.eval.t_grid),
                SensitivityArg::LambdaCons => (SensitivityAxis::LambdaCons, &cfg.eval.lambda_cons_grid),
            };
            let result = evalkit::sensitivity_sweep(&train, &test, &setup, axis, grid, &cfg.eval.seeds, cfg.eval.noise_lambda)?;
            for &v in grid {
                emit(
                    "sensitivity_point",
                    json!({
                        "axis": axis.name(),
                        "value": v,
                        "clean_macro_f1": result.mean_clean_f1(v),
                        "noisy_macro_f1": result.mean_noisy_f1(v),
                        "epoch_seconds": result.mean_epoch_seconds(v),
                    }),
                );
            }
            if let Some(dir) = out_dir(&common)? {
                result.write_csv(&dir.join(format!("sensitivity_{}.csv", axis.name())))?;
            }
        }
        Command::Export { common, checkpoint, kind } => {
            let cfg = load_config(&common, dotted)?;
            let dir = require_out(&common, "export")?;
            let (_, test, _) = cfg.load_datasets()?;
            let params = TrainerState::load(&checkpoint)?.params;
            let (kind, file) = match kind {
                ExportArg::Embeddings => (ExportKind::Embeddings, "embeddings.csv"),
                ExportArg::Attention => (ExportKind::Attention, "attention.csv"),
                ExportArg::FusionWeights => (ExportKind::FusionWeights, "fusion_weights.csv"),
            };
            let path = dir.join(file);
            evalkit::export_arrays(&params, &test, kind, &path)?;
            emit("export", json!({ "kind": kind, "path": path, "windows": test.len() }));
        }
        Command::GradCheck { common, tolerance } => {
            let seed = common.seed.unwrap_or(0);
            let rows = trainer::full_loss_grad_check(&trainer::toy_model_config(), 16, seed, 1e-5)?;
            let mut worst = 0.0f64;
            for r in &rows {
                worst = worst.max(r.max_rel_error);
                emit("grad_check", json!({ "group": r.name, "numel": r.numel, "max_rel_error": r.max_rel_error }));
            }
            let ok = worst < tolerance;
            emit("grad_check_summary", json!({ "groups": rows.len(), "max_rel_error": worst, "tolerance": tolerance, "pass": ok }));
            if !ok {
                return Err(Failure::GradCheck);
            }
        }
    }
    Ok(())
}

fn train(common: &Common, dotted: &[String], resume: Option<&Path>) -> Result<(), Error> {
    let cfg = load_config(common, dotted)?;
    let (train, test, _) = cfg.load_datasets()?;
    let dir = out_dir(common)?;
    if let Some(d) = &dir {
        write_json(&d.join("config.json"), &cfg)?;
    }
    let opts = FitOptions { out_dir: dir.clone(), skip_eval: false };
    let mut observer = |r: &trainer::EpochRecord| {
        let test = r.test.as_ref();
        emit(
            "epoch",
            json!({
                "epoch": r.epoch,
                "loss": r.train_loss,
                "cls": r.train_cls,
                "cons": r.train_cons,
                "seconds": r.train_seconds,
                "test_accuracy": test.map(|t| t.accuracy),
                "test_macro_f1": test.map(|t| t.macro_f1),
                "best_macro_f1": r.best_macro_f1,
            }),
        );
    };
    let outcome = match resume {
        Some(path) => {
            let mut state = TrainerState::load(path)?;
            state.setup.train.epochs = cfg.train.epochs;
            trainer::resume(state, &train, &test, &opts, &mut observer)?
        }
        None => trainer::fit(&train, &test, &cfg.setup_for(&train), &opts, &mut observer)?,
    };
    let best = evalkit::evaluate(&outcome.best.params, &test, None, &RngState::new(cfg.train.seed))?;
    let summary = json!({
        "epochs": outcome.last.epoch,
        "best_epoch": outcome.best.best_epoch,
        "best": best,
        "history": outcome.history,
    });
    if let Some(d) = &dir {
        write_json(&d.join("metrics.json"), &summary)?;
    }
    emit(
        "trained",
        json!({
            "epochs": outcome.last.epoch,
            "best_epoch": outcome.best.best_epoch,
            "accuracy": best.accuracy,
            "macro_f1": best.macro_f1,
            "out": dir,
        }),
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, dotted) = split_dotted_flags(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli.command, &dotted) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::GradCheck) => ExitCode::from(4),
        Err(Failure::Lib(e)) => {
            eprintln!("{}", json!({ "event": "error", "message": e.to_string() }));
            ExitCode::from(exit_code(&e))
        }
    }
}
