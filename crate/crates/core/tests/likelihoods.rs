use postpred::likelihood::{gaussian_log_lik, l1_log_lik};
use postpred::{mc_predictive_loss, LossMode, Tape, Tensor};
use proptest::prelude::*;

fn loss_of(ll: &[f64], l: usize, b: usize, mode: LossMode) -> f64 {
    let tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![l, b], ll.to_vec()).unwrap());
    tape.item(mc_predictive_loss(&tape, v, mode).unwrap()).unwrap()
}

/// -1/B Σ_b log(1/L Σ_l exp(ll_lb)), summed directly.
fn naive_neg_log_mean_prob(ll: &[f64], l: usize, b: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..b {
        let p: f64 = (0..l).map(|i| ll[i * b + j].exp()).sum::<f64>() / l as f64;
        total += p.ln();
    }
    -total / b as f64
}

fn grid(l: usize, b: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-20.0f64..5.0, l * b)
}

proptest! {
    #[test]
    fn matches_direct_summation((l, b, ll) in (1usize..8, 1usize..6).prop_flat_map(|(l, b)| (Just(l), Just(b), grid(l, b)))) {
        let got = loss_of(&ll, l, b, LossMode::NegLogMeanProb);
        let want = naive_neg_log_mean_prob(&ll, l, b);
        prop_assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
        let mp = loss_of(&ll, l, b, LossMode::MeanProb);
        let want_mp = -ll.iter().map(|v| v.exp()).sum::<f64>() / (l * b) as f64;
        prop_assert!((mp - want_mp).abs() <= 1e-12 * want_mp.abs().max(1.0));
    }

    #[test]
    fn invariant_under_sample_and_example_permutation(
        (l, b, ll) in (2usize..7, 2usize..5).prop_flat_map(|(l, b)| (Just(l), Just(b), grid(l, b))),
        rot_l in 0usize..7,
        rot_b in 0usize..5,
    ) {
        let mut permuted = vec![0.0; l * b];
        for i in 0..l {
            for j in 0..b {
                permuted[((i + rot_l) % l) * b + (j + rot_b) % b] = ll[i * b + j];
            }
        }
        for mode in [LossMode::NegLogMeanProb, LossMode::MeanProb] {
            let a = loss_of(&ll, l, b, mode);
            let c = loss_of(&permuted, l, b, mode);
            prop_assert!((a - c).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn finite_for_extreme_log_likelihoods(ll in proptest::collection::vec(-1e6f64..-1e4, 12)) {
        let loss = loss_of(&ll, 4, 3, LossMode::NegLogMeanProb);
        prop_assert!(loss.is_finite());
        // The loss is bounded by the best and worst sample per column.
        let worst = -ll.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(loss <= worst + (4f64).ln() + 1e-6);
    }

    #[test]
    fn gaussian_and_l1_pointwise(y in -5.0f64..5.0, yhat in -5.0f64..5.0, sigma in 0.05f64..3.0) {
        let tape = Tape::new();
        let yv = tape.constant(Tensor::new(vec![1, 1, 1], vec![y]).unwrap());
        let pv = tape.constant(Tensor::new(vec![1, 1, 1], vec![yhat]).unwrap());
        let g = tape.value(gaussian_log_lik(&tape, yv, pv, sigma).unwrap()).data()[0];
        let want = -0.5 * ((y - yhat) / sigma).powi(2) - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        prop_assert!((g - want).abs() < 1e-12);
        let l1 = tape.value(l1_log_lik(&tape, yv, pv).unwrap()).data()[0];
        prop_assert!((l1 + (y - yhat).abs()).abs() < 1e-12);
    }
}

#[test]
fn one_sample_per_example_is_plain_negative_log_likelihood() {
    let ll = [-1.5, -0.25, -3.0];
    let loss = loss_of(&ll, 1, 3, LossMode::NegLogMeanProb);
    assert!((loss - 4.75 / 3.0).abs() < 1e-12);
}
