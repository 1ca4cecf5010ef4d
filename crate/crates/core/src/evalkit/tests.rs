use super::*;
use crate::datasets::{SensorWindow, SplitTag, WindowMeta};
use crate::model::ModelConfig;

/// Independent per-class counter working from raw (truth, pred) pairs.
fn brute_force(k: usize, pairs: &[(usize, usize)]) -> (f64, Vec<(f64, f64, f64)>) {
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    let per = (0..k)
        .map(|c| {
            let tp = pairs.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let fp = pairs.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
            let fn_ = pairs.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
            let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            (p, r, f)
        })
        .collect();
    (correct as f64 / pairs.len() as f64, per)
}

#[test]
fn metrics_match_brute_force_counter() {
    let mut rng = RngState::new(1);
    for _ in 0..1000 {
        let k = rng.int_inclusive(2, 6) as usize;
        let n = rng.int_inclusive(1, 60) as usize;
        let pairs: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.int_inclusive(0, k as u64 - 1) as usize, rng.int_inclusive(0, k as u64 - 1) as usize))
            .collect();
        let report = compute_metrics(&ConfusionMatrix::from_pairs(k, &pairs).unwrap()).unwrap();
        let (acc, per) = brute_force(k, &pairs);
        assert_eq!(report.accuracy, acc);
        for (m, (p, r, f)) in report.per_class.iter().zip(&per) {
            assert_eq!((m.precision, m.recall, m.f1), (*p, *r, *f));
        }
        let macro_f1 = per.iter().map(|x| x.2).sum::<f64>() / k as f64;
        assert_eq!(report.macro_f1, macro_f1);
        assert!(report.macro_f1 <= per.iter().map(|x| x.2).fold(0.0, f64::max));
    }
}

#[test]
fn binary_accuracy_example() {
    // Positive class 1: TP = 90, TN = 5, FP = 3, FN = 2.
    let cm = ConfusionMatrix { num_classes: 2, counts: vec![vec![5, 3], vec![2, 90]] };
    assert_eq!(compute_metrics(&cm).unwrap().accuracy, 0.95);
}

#[test]
fn one_one_one_gives_half() {
    // Class 0 has TP = FP = FN = 1.
    let cm = ConfusionMatrix::from_pairs(3, &[(0, 0), (1, 0), (0, 2)]).unwrap();
    let m = compute_metrics(&cm).unwrap().per_class[0];
    assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
}

#[test]
fn perfect_classifier_scores_one() {
    let cm = ConfusionMatrix::from_pairs(3, &[(0, 0), (1, 1), (2, 2), (2, 2)]).unwrap();
    let r = compute_metrics(&cm).unwrap();
    assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
}

#[test]
fn empty_matrix_is_a_data_error() {
    assert!(matches!(compute_metrics(&ConfusionMatrix::new(3)), Err(Error::Data(_))));
}

#[test]
fn zero_support_class_scores_zero_not_nan() {
    let cm = ConfusionMatrix::from_pairs(3, &[(0, 0), (1, 1)]).unwrap();
    let r = compute_metrics(&cm).unwrap();
    assert_eq!(r.per_class[2].f1, 0.0);
    assert!(r.macro_f1.is_finite());
}

fn tiny_model_and_data(seed: u64) -> (EncoderParams, WindowedDataset) {
    let cfg = ModelConfig {
        window_len: 8,
        channels: 2,
        latent_dim: 4,
        state_dim: 2,
        num_blocks: 1,
        num_classes: 3,
        time_embed_dim: 8,
        ..Default::default()
    };
    let mut rng = RngState::new(seed);
    let params = EncoderParams::init(&cfg, &mut rng).unwrap();
    let windows = (0..30)
        .map(|i| SensorWindow {
            x: Tensor::new(rng.normals(16), &[8, 2]).unwrap(),
            label: i % 3,
            meta: WindowMeta { recording: "r".into(), start: i },
        })
        .collect();
    (params, WindowedDataset::new(windows, 3, SplitTag::Test).unwrap())
}

#[test]
fn no_corruption_equals_zero_intensity() {
    let (p, data) = tiny_model_and_data(2);
    let clean = evaluate(&p, &data, None, &RngState::new(0)).unwrap();
    let zero = evaluate(&p, &data, Some(&EvalCorruptionSpec::Noise { lambda: 0.0 }), &RngState::new(9)).unwrap();
    assert_eq!(clean, zero);
}

#[test]
fn fully_missing_input_collapses_to_one_class() {
    let (p, data) = tiny_model_and_data(3);
    let r = evaluate(&p, &data, Some(&EvalCorruptionSpec::Missing { rho: 1.0 }), &RngState::new(0)).unwrap();
    let used: Vec<u64> = (0..3).map(|c| r.confusion.counts.iter().map(|row| row[c]).sum()).collect();
    assert_eq!(used.iter().filter(|&&n| n > 0).count(), 1);
    assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn corrupted_evaluation_is_reproducible() {
    let (p, data) = tiny_model_and_data(4);
    let spec = EvalCorruptionSpec::Noise { lambda: 0.7 };
    let a = evaluate(&p, &data, Some(&spec), &RngState::new(5)).unwrap();
    let b = evaluate(&p, &data, Some(&spec), &RngState::new(5)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let (p, data) = tiny_model_and_data(5);
    let wrong = WindowedDataset::new(data.windows.iter().map(|w| SensorWindow { label: w.label % 2, ..w.clone() }).collect(), 2, SplitTag::Test).unwrap();
    assert!(matches!(evaluate(&p, &wrong, None, &RngState::new(0)), Err(Error::Config(_))));
}

#[test]
fn single_point_sweep_equals_clean_evaluation() {
    let (p, data) = tiny_model_and_data(6);
    let s = sweep(&p, &data, SweepAxis::Rho, &[0.0], &[3]).unwrap();
    let clean = evaluate(&p, &data, None, &RngState::new(0)).unwrap();
    assert_eq!(s.points.len(), 1);
    assert_eq!(s.points[0].macro_f1, clean.macro_f1);
}

#[test]
fn sweep_rejects_bad_grids() {
    let (p, data) = tiny_model_and_data(7);
    assert!(matches!(sweep(&p, &data, SweepAxis::Lambda, &[], &[0]), Err(Error::Config(_))));
    assert!(matches!(sweep(&p, &data, SweepAxis::Lambda, &[0.2, 0.1], &[0]), Err(Error::Config(_))));
    assert!(sweep(&p, &data, SweepAxis::Rho, &[0.0, 1.5], &[0]).is_err());
}

#[test]
fn sweep_csv_has_one_row_per_point_and_metric() {
    let (p, data) = tiny_model_and_data(8);
    let s = sweep(&p, &data, SweepAxis::Lambda, &[0.0, 0.5], &[0, 1]).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    s.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "axis,value,seed,metric,score");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert_eq!(s.summary().len(), 2);
}

#[test]
fn exports_have_the_documented_shapes() {
    let (p, data) = tiny_model_and_data(9);
    let dir = tempfile::tempdir().unwrap();
    let read = |kind: ExportKind| {
        let path = dir.path().join("e.csv");
        export_arrays(&p, &data, kind, &path).unwrap();
        let mut r = csv::Reader::from_path(&path).unwrap();
        let header = r.headers().unwrap().len();
        let rows: Vec<Vec<f64>> = r
            .records()
            .map(|rec| rec.unwrap().iter().map(|v| v.parse().unwrap()).collect())
            .collect();
        (header, rows)
    };

    let (cols, rows) = read(ExportKind::Embeddings);
    assert_eq!(cols, 4 + 2);
    assert_eq!(rows.len(), 30);

    let (cols, rows) = read(ExportKind::Attention);
    assert_eq!(cols, 3 + 4);
    assert_eq!(rows.len(), 3 * 4);
    for row in &rows {
        assert!((row[3..].iter().sum::<f64>() - 1.0).abs() < 1e-4);
    }

    let (_, rows) = read(ExportKind::FusionWeights);
    assert_eq!(rows.len(), 30);
    assert!(rows.iter().all(|r| (r[3] + r[4] - 1.0).abs() < 1e-12));
}
