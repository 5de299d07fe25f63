mod common;

use approx::assert_relative_eq;
use latentuq::config::{parse_config, render_config};
use latentuq::dataio::{self, Dataset};
use latentuq::eval::{evaluate, export_histogram, Summary};
use latentuq::latent_uq::{smoothstep, smoothstep_with, SmoothstepForm};
use latentuq::linalg::{cholesky, fit_gaussian, percentile, GaussianDensity};
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn spd_case() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..=5).prop_flat_map(|d| {
        (
            Just(d),
            prop::collection::vec(-2.0..2.0f64, d * d),
            prop::collection::vec(-3.0..3.0f64, d),
            prop::collection::vec(-3.0..3.0f64, d),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn cholesky_reproduces_matrix((d, b, _, _) in spd_case()) {
        let a = common::spd_from(&b, d, 0.5);
        let l = cholesky(a.view()).unwrap();
        for i in 0..d {
            for j in i + 1..d {
                prop_assert_eq!(l[[i, j]], 0.0);
            }
        }
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn log_density_matches_inverse_oracle((d, b, mu, x) in spd_case()) {
        let cov = common::spd_from(&b, d, 0.5);
        let mean = Array1::from(mu);
        let x = Array1::from(x);
        let g = GaussianDensity::from_parts(mean.clone(), cholesky(cov.view()).unwrap(), 0.0).unwrap();
        let got = g.log_density(x.view()).unwrap();
        let want = common::log_density_oracle(&mean, &cov, &x);
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want.abs()), "{} vs {}", got, want);
    }

    #[test]
    fn density_peaks_at_mean((d, b, mu, x) in spd_case()) {
        let cov = common::spd_from(&b, d, 0.5);
        let mean = Array1::from(mu);
        let g = GaussianDensity::from_parts(mean.clone(), cholesky(cov.view()).unwrap(), 0.0).unwrap();
        let at_mean = g.log_density(mean.view()).unwrap();
        prop_assert!(g.log_density(Array1::from(x).view()).unwrap() <= at_mean);
    }

    #[test]
    fn fitted_gaussian_never_fails(n in 2usize..12, d in 1usize..8, seed in any::<u64>(), constant in any::<bool>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        if constant {
            x.column_mut(0).fill(0.25);
        }
        let g = fit_gaussian(x.view(), 1e-6).unwrap();
        prop_assert!(g.reg_lambda() >= 1e-10);
        prop_assert!(g.log_density(x.row(0)).unwrap().is_finite());
    }

    #[test]
    fn percentile_is_monotone(v in prop::collection::vec(-1e3..1e3f64, 1..60), p in 0.0..100.0f64, q in 0.0..100.0f64) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        let a = percentile(&v, lo).unwrap();
        let b = percentile(&v, hi).unwrap();
        prop_assert!(a <= b);
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(percentile(&v, 0.0).unwrap(), min);
        prop_assert_eq!(percentile(&v, 100.0).unwrap(), max);
    }

    #[test]
    fn idx_round_trip(n in 1usize..6, rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array2::from_shape_fn((n, rows * cols), |_| f64::from(rng.gen::<u8>()) / 255.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..10)).collect();
        let mut img = Vec::new();
        dataio::write_idx_images(&pixels, rows, cols, &mut img).unwrap();
        let mut lab = Vec::new();
        dataio::write_idx_labels(&labels, &mut lab).unwrap();
        prop_assert_eq!(dataio::load_idx_images(&img[..]).unwrap(), pixels);
        prop_assert_eq!(dataio::load_idx_labels(&lab[..]).unwrap(), labels);
    }

    #[test]
    fn config_render_round_trip(
        hidden in prop::collection::vec(1usize..2048, 1..5),
        dropout in 0.0..0.9f64,
        pairs in prop::collection::vec((0.0..100.0f64, 0.0..100.0f64), 1..4),
        seed in 0u64..(i64::MAX as u64 - 100),
        mc in any::<bool>(),
    ) {
        let mut doc = format!(
            "[data]\nsource = \"blobs\"\nnum_classes = 4\ndim = 3\ntrain_per_class = 10\ntest_per_class = 5\n\
             separation = 2.5\nseed = {seed}\n\n[network]\nhidden = {hidden:?}\ndropout = {dropout:?}\n\n\
             [training]\nseed = {seed}\n\n[inference]\n"
        );
        for (a, b) in &pairs {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            doc.push_str(&format!("[[inference.percentiles]]\nalpha = {lo:?}\nbeta = {hi:?}\n"));
        }
        if mc {
            doc.push_str(&format!("\n[mc_dropout]\nseed = {seed}\n"));
        }
        doc.push_str("\n[run]\noutput_dir = \"out\"\n");
        let cfg = parse_config(&doc).unwrap();
        let again = parse_config(&render_config(&cfg).unwrap()).unwrap();
        prop_assert_eq!(again, cfg);
    }

    #[test]
    fn smoothstep_monotone_and_bounded(qa in -500.0..500.0f64, width in 0.0..200.0f64, a in -800.0..800.0f64, b in -800.0..800.0f64) {
        let qb = qa + width;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let s_lo = smoothstep(lo, qa, qb).unwrap();
        let s_hi = smoothstep(hi, qa, qb).unwrap();
        prop_assert!((0.0..=1.0).contains(&s_lo) && (0.0..=1.0).contains(&s_hi));
        prop_assert!(s_lo <= s_hi);
    }

    #[test]
    fn smoothstep_shift_invariant(qa in -1024i32..1024, width in 0i32..512, at in -2048i32..2048, shift in -4096i32..4096) {
        // Quarter-integer grid: every sum and difference is exact in f64.
        let q = |v: i32| f64::from(v) * 0.25;
        let (qa_f, qb_f, x) = (q(qa), q(qa + width), q(at));
        let s = q(shift);
        prop_assert_eq!(
            smoothstep(x, qa_f, qb_f).unwrap(),
            smoothstep(x + s, qa_f + s, qb_f + s).unwrap()
        );
    }

    #[test]
    fn threshold_monotonicity(seed in any::<u64>(), n in 1usize..200) {
        let set = common::random_scored(seed, n);
        let mut prev = evaluate(&set, 0.0).unwrap();
        for i in 1..=100 {
            let m = evaluate(&set, f64::from(i) / 100.0).unwrap();
            if let (Some(a), Some(b)) = (prev.tp_rate, m.tp_rate) { prop_assert!(b <= a); }
            if let (Some(a), Some(b)) = (prev.tn_rate, m.tn_rate) { prop_assert!(b >= a); }
            if let (Some(a), Some(b)) = (prev.tn_ood_rate, m.tn_ood_rate) { prop_assert!(b >= a); }
            prev = m;
        }
    }

    #[test]
    fn histogram_recovers_group_counts(seed in any::<u64>(), n in 1usize..300, bins in 1usize..40) {
        let set = common::random_scored(seed, n);
        let m = evaluate(&set, 0.5).unwrap();
        let h = export_histogram(&set, bins);
        prop_assert_eq!(h.well_classified.iter().sum::<usize>(), m.well_classified);
        prop_assert_eq!(h.misclassified.iter().sum::<usize>(), m.misclassified);
        prop_assert_eq!(h.ood.iter().sum::<usize>(), m.ood);
    }

    #[test]
    fn aggregate_mean_within_range(v in prop::collection::vec(0.0..=1.0f64, 1..12)) {
        let s = Summary::of(v.iter().map(|&x| Some(x)));
        let mean = s.mean.unwrap();
        let min = v.iter().copied().fold(f64::INFINITY, f64::min);
        let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(mean >= min - 1e-15 && mean <= max + 1e-15);
    }

    #[test]
    fn split_partitions_test_set(held in 0usize..4, seed in 0u64..1000) {
        let (train, test) = dataio::synth_blobs_split(4, 3, 6, 4, 3.0, seed).unwrap();
        let s = dataio::make_ood_split(&train, &test, held).unwrap();
        prop_assert_eq!(s.test_in.len() + s.test_ood.len(), test.len());
        prop_assert!(s.test_ood.labels().iter().all(|&l| l == held));
        prop_assert_eq!(s.train.num_classes(), 3);
        prop_assert!(s.train.labels().iter().all(|&l| l < 3));
        let _: &Dataset = &s.train;
    }
}

#[test]
fn smoothstep_endpoints_and_midpoint() {
    assert_eq!(smoothstep(-10.0, -10.0, -2.0).unwrap(), 0.0);
    assert_eq!(smoothstep(-2.0, -10.0, -2.0).unwrap(), 1.0);
    assert_eq!(smoothstep(-6.0, -10.0, -2.0).unwrap(), 0.5);
    assert_eq!(smoothstep(-3.0, -3.0, -3.0).unwrap(), 1.0);
    assert_eq!(smoothstep(-3.1, -3.0, -3.0).unwrap(), 0.0);
    assert_relative_eq!(
        smoothstep_with(SmoothstepForm::Literal, -6.0, -10.0, -2.0).unwrap(),
        0.5 * ((-0.5f64).tanh() + 1.0),
        epsilon = 1e-15
    );
    assert!(smoothstep(0.0, 1.0, 0.0).is_err());
}
