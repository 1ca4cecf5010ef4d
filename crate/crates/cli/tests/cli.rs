use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mcstn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcstn")).args(args).output().expect("spawn mcstn")
}

fn events(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not JSON ({e}): {l}")))
        .collect()
}

fn of_kind<'a>(evs: &'a [Value], kind: &str) -> Vec<&'a Value> {
    evs.iter().filter(|e| e["event"] == kind).collect()
}

const TINY: [&str; 8] = [
    "--set",
    "model.latent_dim=8",
    "--set",
    "model.state_dim=4",
    "--set",
    "model.time_embed_dim=16",
    "--set",
    "train.batch_size=100",
];

fn synth_dir(root: &Path) -> String {
    let dir = root.join("data");
    let d = dir.to_str().unwrap().to_string();
    let out = mcstn(&["synth", "--out", &d, "--set", "dataset.synth.train_windows=200", "--set", "dataset.synth.test_windows=60"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    d
}

fn train(data: &str, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", data, "--out", out];
    args.extend_from_slice(&TINY);
    args.extend_from_slice(extra);
    mcstn(&args)
}

#[test]
fn grad_check_reports_every_group_and_passes() {
    let out = mcstn(&["grad-check"]);
    assert!(out.status.success());
    let evs = events(&out);
    assert_eq!(of_kind(&evs, "grad_check").len(), 42);
    let summary = of_kind(&evs, "grad_check_summary")[0];
    assert_eq!(summary["pass"], true);
    assert!(summary["max_rel_error"].as_f64().unwrap() < 1e-3);
}

#[test]
fn synth_train_eval_export_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path());
    for f in ["train.json", "test.json", "stats.json"] {
        assert!(Path::new(&data).join(f).exists());
    }
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();
    let out = train(&data, run_s, &["--set", "train.epochs=2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let evs = events(&out);
    assert_eq!(of_kind(&evs, "epoch").len(), 2);
    assert_eq!(of_kind(&evs, "trained")[0]["epochs"], 2);
    for f in ["best.ckpt", "last.ckpt", "metrics.json", "config.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let ckpt = run.join("best.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let out = mcstn(&["eval", "--checkpoint", ckpt, "--data", &data, "--lambda", "0.5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let evs = events(&out);
    let m = of_kind(&evs, "metrics")[0];
    assert_eq!(m["corruption"]["kind"], "noise");
    let acc = m["report"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let exp = tmp.path().join("exp");
    let exp_s = exp.to_str().unwrap();
    let out = mcstn(&["export", "--checkpoint", ckpt, "--data", &data, "--kind", "fusion-weights", "--out", exp_s]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(exp.join("fusion_weights.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), "window_id,label,block,alpha,beta");

    let out = mcstn(&["sweep", "--checkpoint", ckpt, "--data", &data, "--axis", "rho", "--out", exp_s, "--set", "eval.seeds=[0]"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(of_kind(&events(&out), "sweep_point").len(), 6);
    assert!(exp.join("sweep_rho.csv").exists());
}

#[test]
fn flags_override_the_config_file_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path());
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"train": {"epochs": 3}}"#).unwrap();
    let cfg_s = cfg.to_str().unwrap();
    let run = tmp.path().join("run");
    let run_s = run.to_str().unwrap();

    let out = train(&data, run_s, &["--config", cfg_s, "--set", "train.epochs=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(of_kind(&events(&out), "epoch").len(), 1);

    let out = train(&data, run_s, &["--config", cfg_s, "--train.epochs", "2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(of_kind(&events(&out), "epoch").len(), 2);

    let saved: Value = serde_json::from_str(&std::fs::read_to_string(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["train"]["epochs"], 2);
    assert_eq!(saved["model"]["latent_dim"], 8);
}

#[test]
fn same_seed_gives_identical_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dir(tmp.path());
    let strip = |out: &Output| {
        events(out)
            .into_iter()
            .filter(|e| e["event"] == "epoch")
            .map(|mut e| {
                e.as_object_mut().unwrap().remove("seconds");
                e
            })
            .collect::<Vec<_>>()
    };
    let a = train(&data, tmp.path().join("a").to_str().unwrap(), &["--seed", "7", "--set", "train.epochs=1"]);
    let b = train(&data, tmp.path().join("b").to_str().unwrap(), &["--seed", "7", "--set", "train.epochs=1"]);
    let c = train(&data, tmp.path().join("c").to_str().unwrap(), &["--seed", "8", "--set", "train.epochs=1"]);
    assert_eq!(strip(&a), strip(&b));
    assert_ne!(strip(&a), strip(&c));
    let ra = std::fs::read(tmp.path().join("a/last.ckpt")).unwrap();
    let rb = std::fs::read(tmp.path().join("b/last.ckpt")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mcstn(&["train", "--set", "train.epoch=3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = mcstn(&["train", "--set", "train.lr=-1"]);
    assert_eq!(out.status.code(), Some(2));

    let missing = tmp.path().join("nowhere");
    let out = mcstn(&["eval", "--checkpoint", "x.ckpt", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let bad = tmp.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint at all").unwrap();
    let data = synth_dir(tmp.path());
    let out = mcstn(&["eval", "--checkpoint", bad.to_str().unwrap(), "--data", &data]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("checkpoint format error"), "{err}");
}
