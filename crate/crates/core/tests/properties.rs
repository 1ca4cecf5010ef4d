//! Cross-module invariants checked on random inputs.

use mcstn::corruption::{build_schedule, diffuse, make_twin_views};
use mcstn::model::ssm::{ssm_scan, ScanDirection, SsmParams};
use mcstn::numerics::{grad_check, RngState, Tensor};
use mcstn::Result;
use proptest::prelude::*;

fn random(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let mut rng = RngState::new(seed);
    let n = shape.iter().product();
    Tensor::new(rng.normals(n).into_iter().map(|v| v * scale).collect(), shape).unwrap()
}

type Unary = fn(&Tensor) -> Result<Tensor>;

const UNARY: [(&str, Unary); 13] = [
    ("exp", |x| x.exp()?.mean()),
    ("square", |x| x.square()?.sum()),
    ("sigmoid", |x| x.sigmoid()?.sum()),
    ("silu", |x| x.silu()?.sum()),
    ("softplus", |x| x.softplus()?.sum()),
    ("log", |x| x.square()?.add_scalar(1.0)?.log()?.sum()),
    ("softmax", |x| x.softmax(1)?.square()?.sum()),
    ("log_softmax", |x| x.log_softmax(0)?.square()?.mean()),
    ("transpose", |x| x.transpose()?.matmul(x)?.sum()),
    ("flip", |x| x.flip(0)?.mul(x)?.sum()),
    ("mean_axis", |x| x.mean_axis(0)?.square()?.sum()),
    ("sum_axis", |x| x.sum_axis(1)?.square()?.sum()),
    ("squared_norm", |x| x.squared_norm()),
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn every_primitive_matches_finite_differences(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let x = random(seed, &[rows, cols], 1.0);
        for (name, f) in UNARY {
            let err = grad_check(f, &x, 1e-6);
            prop_assert!(err < 1e-3, "{name} on {rows}x{cols}: {err}");
        }
        let w = random(seed + 1, &[cols, 3], 1.0);
        let gamma = random(seed + 2, &[cols], 1.0);
        let beta = random(seed + 3, &[cols], 1.0);
        let y = random(seed + 4, &[rows, cols], 1.0);
        let binary: [(&str, Box<dyn Fn(&Tensor) -> Result<Tensor>>); 6] = [
            ("matmul", Box::new(|t: &Tensor| t.matmul(&w)?.square()?.sum())),
            ("mul", Box::new(|t: &Tensor| t.mul(&y)?.mul(t)?.sum())),
            ("div", Box::new(|t: &Tensor| y.div(&t.square()?.add_scalar(1.0)?)?.sum())),
            ("sub", Box::new(|t: &Tensor| t.sub(&y)?.square()?.sum())),
            ("layer_norm", Box::new(|t: &Tensor| t.layer_norm(&gamma, &beta, 1e-5)?.mul(&y)?.sum())),
            ("expand", Box::new(|t: &Tensor| t.mean_axis(0)?.expand(0, rows)?.mul(&y)?.sum())),
        ];
        for (name, f) in &binary {
            let err = grad_check(f, &x, 1e-6);
            prop_assert!(err < 1e-3, "{name} on {rows}x{cols}: {err}");
        }
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..8, cols in 1usize..8, seed in 0u64..1000, scale in 0.1f64..50.0) {
        let s = random(seed, &[rows, cols], scale).softmax(1).unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn double_flip_is_identity(rows in 1usize..10, cols in 1usize..10, seed in 0u64..1000, axis in 0usize..2) {
        let x = random(seed, &[rows, cols], 3.0);
        let back = x.flip(axis).unwrap().flip(axis).unwrap();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn twin_views_share_the_physically_corrupted_window(seed in 0u64..1000, steps in 4usize..300) {
        let sched = build_schedule(steps, 1e-4, 0.02).unwrap();
        let x = random(seed, &[6, 2], 1.0);
        let v = make_twin_views(&x, &sched, &mut RngState::new(seed)).unwrap();
        prop_assert!(v.t_low < v.t_high);
        // Replaying the draws against the same x reproduces both views exactly.
        let mut rng = RngState::new(seed);
        let half = sched.half() as u64;
        let t_low = rng.int_inclusive(1, half - 1) as usize;
        let low = diffuse(&x, t_low, &sched, &mut rng).unwrap();
        let t_high = rng.int_inclusive(half, steps as u64) as usize;
        let high = diffuse(&x, t_high, &sched, &mut rng).unwrap();
        prop_assert_eq!((t_low, t_high), (v.t_low, v.t_high));
        prop_assert_eq!(low.data(), v.x_low.data());
        prop_assert_eq!(high.data(), v.x_high.data());
    }

    #[test]
    fn scan_is_time_causal(len in 2usize..20, seed in 0u64..1000, cut in 1usize..19) {
        let cut = cut.min(len - 1);
        let (d, n) = (3, 2);
        let p = SsmParams {
            a_log: random(seed, &[d, n], 0.5),
            w_delta: random(seed + 1, &[d, d], 0.3),
            delta_bias: random(seed + 2, &[1, d], 0.5),
            w_b: random(seed + 3, &[d, n], 0.5),
            w_c: random(seed + 4, &[d, n], 0.5),
        };
        let x = random(seed + 5, &[len, d], 1.0);
        let mut later = x.to_vec();
        for v in &mut later[cut * d..] {
            *v += 1.0;
        }
        let x2 = Tensor::new(later, &[len, d]).unwrap();
        let a = ssm_scan(&x, &p, ScanDirection::Fwd, true).unwrap();
        let b = ssm_scan(&x2, &p, ScanDirection::Fwd, true).unwrap();
        prop_assert_eq!(&a.data()[..cut * d], &b.data()[..cut * d]);
        // The backward scan is anti-causal: changing the prefix leaves the suffix alone.
        let mut earlier = x.to_vec();
        for v in &mut earlier[..cut * d] {
            *v -= 1.0;
        }
        let x3 = Tensor::new(earlier, &[len, d]).unwrap();
        let ra = ssm_scan(&x, &p, ScanDirection::Bwd, true).unwrap();
        let rb = ssm_scan(&x3, &p, ScanDirection::Bwd, true).unwrap();
        prop_assert_eq!(&ra.data()[cut * d..], &rb.data()[cut * d..]);
    }
}
