use std::f64::consts::PI;

use postpred::datasets::{self, window_series, Standardizer};
use postpred::evaluation::{self, detect_bimodality, forecast_metrics, naive_forecasts, rmse};
use postpred::posterior::{HypernetArch, InitSpec, LatentBase, PosteriorModel, UnconditionedPosterior};
use postpred::{sample_predictive, LinearModel, Modality, PredictiveFan, PrimaryModel, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn windows_read_the_series_in_order(len in 6usize..60, h_in in 1usize..5, h_out in 1usize..4, frac in 0.1f64..0.9) {
        prop_assume!(len >= h_in + h_out + 1);
        let series: Vec<f64> = (0..len).map(|t| t as f64).collect();
        let w = window_series(&series, h_in, h_out).unwrap().with_split(frac).unwrap();
        prop_assert_eq!(w.len(), len - h_in - h_out + 1);
        for m in 0..w.len() {
            prop_assert_eq!(w.inputs.row(m), &series[m..m + h_in]);
            prop_assert_eq!(w.targets.row(m), &series[m + h_in..m + h_in + h_out]);
        }
        let (train, test) = (w.train().unwrap(), w.test().unwrap());
        prop_assert_eq!(train.len() + test.len(), w.len());
        // Every training window starts before every test window.
        let last_train = train.x.row(train.len() - 1)[0];
        let first_test = test.x.row(0)[0];
        prop_assert!(last_train < first_test);
    }

    #[test]
    fn standardization_invariants(rows in 2usize..40, cols in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-50.0..50.0)).collect();
        let t = Tensor::new(vec![rows, cols], data).unwrap();
        let s = Standardizer::fit(&t).unwrap();
        let z = s.apply(&t).unwrap();
        for j in 0..cols {
            let col: Vec<f64> = (0..rows).map(|i| z.get(&[i, j])).collect();
            let mean = col.iter().sum::<f64>() / rows as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows as f64;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
        let back = s.invert(&z).unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            prop_assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn metrics_ignore_pair_order(pairs in proptest::collection::vec((-10.0f64..10.0, 0.5f64..10.0), 1..30), seed in any::<u64>()) {
        let (pred, target): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..idx.len()).rev() {
            idx.swap(i, rng.random_range(0..=i));
        }
        let pp: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
        let tp: Vec<f64> = idx.iter().map(|&i| target[i]).collect();
        prop_assert!((rmse(&pred, &target).unwrap() - rmse(&pp, &tp).unwrap()).abs() < 1e-12);
        let a = evaluation::mape(&pred, &target).unwrap().value;
        let b = evaluation::mape(&pp, &tp).unwrap().value;
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn quantiles_bracket_mean_of_symmetric_fans(half in proptest::collection::vec(0.0f64..3.0, 1..20), center in -5.0f64..5.0) {
        let mut s: Vec<f64> = half.iter().map(|d| center + d).collect();
        s.extend(half.iter().map(|d| center - d));
        let n = s.len();
        let fan = PredictiveFan::from_samples(Tensor::new(vec![n, 1, 1], s).unwrap()).unwrap();
        let (lo, mid, hi, mean) = (fan.q025.data()[0], fan.q50.data()[0], fan.q975.data()[0], fan.mean.data()[0]);
        prop_assert!(lo <= mean + 1e-12 && mean <= hi + 1e-12);
        prop_assert!((mid - mean).abs() < 1e-9);
    }
}

#[test]
fn persistence_on_a_sine_matches_closed_form() {
    let period = 12;
    let w = 2.0 * PI / period as f64;
    let h_out = 3;
    let series: Vec<f64> = (0..period * 40).map(|t| (w * t as f64).sin()).collect();
    let win = window_series(&series, 6, h_out).unwrap();
    // Keep a whole number of periods of window phases.
    let m = win.len() / period * period;
    let idx: Vec<usize> = (0..m).collect();
    let inputs = win.inputs.select_rows(&idx).unwrap();
    let targets = win.targets.select_rows(&idx).unwrap();
    let naive = naive_forecasts(&inputs, h_out).unwrap();
    // E_φ[(sin(φ + jω) − sin φ)²] = 2 sin²(jω/2)
    let mse: f64 = (1..=h_out).map(|j| 2.0 * (j as f64 * w / 2.0).sin().powi(2)).sum::<f64>() / h_out as f64;
    let pooled = rmse(naive.data(), targets.data()).unwrap();
    assert!((pooled - mse.sqrt()).abs() < 1e-12, "{pooled} vs {}", mse.sqrt());
    let per_window = forecast_metrics(&naive, &targets).unwrap();
    assert!(per_window.rmse <= pooled + 1e-12);
    assert_eq!(per_window.windows, m);
}

fn linear_setup(seed: u64, degenerate: bool) -> (LinearModel, UnconditionedPosterior) {
    let primary = LinearModel::new(1, 1);
    let arch = HypernetArch::parse("[2,8,P]", primary.layout().total_len()).unwrap();
    let init = InitSpec {
        theta_center: None,
        output_scale: Some(1.0),
    };
    let mut post = UnconditionedPosterior::new(&arch, LatentBase::default(), &init, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    if degenerate {
        post.make_degenerate();
    }
    (primary, post)
}

#[test]
fn degenerate_posterior_fan_has_zero_width() {
    let (primary, post) = linear_setup(1, true);
    let x = Tensor::new(vec![300, 1], datasets::linspace(-3.0, 3.0, 300)).unwrap();
    let fan = sample_predictive(&primary, &post, &x, None, 30, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let width = fan.q975.data().iter().zip(fan.q025.data()).map(|(a, b)| a - b).fold(0.0, f64::max);
    assert!(width < 1e-9, "band width {width}");
}

#[test]
fn small_fan_mean_is_close_to_large_fan_mean() {
    let (primary, post) = linear_setup(3, false);
    let x = Tensor::new(vec![5, 1], vec![-2.0, -1.0, 0.0, 1.0, 2.0]).unwrap();
    let small = sample_predictive(&primary, &post, &x, None, 30, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let large = sample_predictive(&primary, &post, &x, None, 3000, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    for i in 0..5 {
        let draws = large.point(i, 0);
        let m = large.mean.data()[i];
        let sd = (draws.iter().map(|v| (v - m).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        let tol = 4.0 * sd / 30f64.sqrt() + 1e-12;
        assert!((small.mean.data()[i] - m).abs() < tol, "point {i}");
    }
}

#[test]
fn unconditioned_fan_samples_are_straight_lines() {
    let (primary, post) = linear_setup(6, false);
    assert_eq!(post.cond_dim(), 0);
    let x = Tensor::new(vec![3, 1], vec![0.0, 1.0, 2.0]).unwrap();
    let fan = sample_predictive(&primary, &post, &x, None, 10, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    for s in 0..10 {
        let y: Vec<f64> = (0..3).map(|i| fan.samples.get(&[s, i, 0])).collect();
        assert!(((y[2] - y[1]) - (y[1] - y[0])).abs() < 1e-12);
    }
}

#[test]
fn bimodality_on_clean_cases() {
    let split: Vec<f64> = (0..30).map(|i| if i % 2 == 0 { 0.0 } else { 1.0 }).collect();
    assert_eq!(detect_bimodality(&split, (0.0, 1.0)), Modality::Bimodal);
    let one = vec![0.02; 30];
    assert_eq!(detect_bimodality(&one, (0.0, 1.0)), Modality::Unimodal);
    let between: Vec<f64> = (0..30).map(|i| 0.5 + 0.01 * (i % 3) as f64).collect();
    assert_eq!(detect_bimodality(&between, (0.0, 1.0)), Modality::Unimodal);
}
