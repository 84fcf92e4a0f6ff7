use icmlm_tensor::{log_softmax, log_sum_exp, softmax};
use proptest::prelude::*;

proptest! {
    #[test]
    fn lse_is_bracketed_by_the_max(xs in prop::collection::vec(-1e4f64..1e4, 1..200)) {
        let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let l = log_sum_exp(&xs);
        prop_assert!(l.is_finite());
        prop_assert!(l >= m);
        prop_assert!(l <= m + (xs.len() as f64).ln() + 1e-9);
    }

    #[test]
    fn softmax_is_a_distribution(xs in prop::collection::vec(-1e4f64..1e4, 1..200)) {
        let p = softmax(&xs);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&xs);
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a - b.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn lse_is_shift_equivariant(xs in prop::collection::vec(-100f64..100.0, 1..50), c in -1e3f64..1e3) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - log_sum_exp(&xs) - c).abs() < 1e-9);
    }
}
