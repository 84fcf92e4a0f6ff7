use icmlm::caption::normalize;
use icmlm::eval::{average_precision, mtp_scores};
use icmlm::fusion::{att_pool, att_scores, AttFcConfig};
use icmlm_tensor::{ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn att_setup(heads: usize, seed: u64) -> (AttFcConfig, ParamStore<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AttFcConfig { heads, d_z: 3, fc_hidden: vec![] };
    let mut p = ParamStore::new();
    cfg.init(&mut p, 5, 4, &mut rng);
    (cfg, p, rng)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pooled_feature_is_a_convex_combination(heads in 1usize..4, cells in 1usize..10, t in 1usize..6, seed in any::<u64>()) {
        let (cfg, p, mut rng) = att_setup(heads, seed);
        let x = Tensor::<f64>::randn(cells, 5, 2.0, &mut rng);
        let w = Tensor::<f64>::randn(t, 4, 2.0, &mut rng);
        let scores = att_scores(&cfg, &p, &x, &w).unwrap();
        prop_assert!(scores.iter().all(|s| s.data().iter().all(|&v| v >= 0.0)));
        let (xhat, patt) = att_pool(&cfg, &p, &scores, &x).unwrap();
        prop_assert!(patt.iter().all(|&v| v >= 0.0));
        prop_assert!((patt.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, &v) in xhat.iter().enumerate() {
            let col: Vec<f64> = (0..cells).map(|c| x.at(c, j)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn pooling_stays_finite_for_huge_scores(heads in 1usize..3, mag in 1.0f64..1e4, seed in any::<u64>()) {
        let (cfg, p, mut rng) = att_setup(heads, seed);
        let x = Tensor::<f64>::randn(6, 5, 1.0, &mut rng);
        let scores: Vec<Tensor<f64>> = (0..heads)
            .map(|_| {
                let mut s = Tensor::<f64>::randn(6, 3, 1.0, &mut rng);
                s.data_mut().iter_mut().for_each(|v| *v = v.abs() * mag);
                s
            })
            .collect();
        let (xhat, patt) = att_pool(&cfg, &p, &scores, &x).unwrap();
        prop_assert!(xhat.iter().chain(&patt).all(|v| v.is_finite()));
        prop_assert!((patt.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalized_labels_sum_to_one(presence in prop::collection::vec(0u8..2, 1..40)) {
        let v: Vec<f64> = presence.iter().map(|&b| b as f64).collect();
        match normalize(&v) {
            Some(n) => prop_assert!((n.iter().sum::<f64>() - 1.0).abs() < 1e-12),
            None => prop_assert!(v.iter().all(|&x| x == 0.0)),
        }
    }

    #[test]
    fn average_precision_ignores_monotone_maps(items in prop::collection::vec((-60i32..60, any::<bool>()), 1..50)) {
        let scores: Vec<f64> = items.iter().map(|&(s, _)| s as f64).collect();
        let positive: Vec<bool> = items.iter().map(|&(_, p)| p).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| (s / 7.0).exp() + s.powi(3)).collect();
        prop_assert_eq!(average_precision(&scores, &positive), average_precision(&mapped, &positive));
    }

    #[test]
    fn top5_is_at_least_top1(rows in prop::collection::vec((prop::collection::vec(0.0f32..1.0, 8), 0usize..8), 1..30)) {
        let probs: Vec<Vec<f32>> = rows.iter().map(|r| r.0.clone()).collect();
        let targets: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let s = mtp_scores(&probs, &targets).unwrap();
        prop_assert!(s.top5 >= s.top1);
    }
}
