use std::collections::BTreeMap;

use icmlm::corpus::synthetic::{generate_synthetic_with, SynthOptions};
use icmlm::eval::*;
use icmlm::fusion::AttentionMap;
use icmlm_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn uniform_model_scores_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 10_000;
    let probs = vec![vec![0.01f32; 100]; n];
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..100)).collect();
    let s = mtp_scores(&probs, &targets).unwrap();
    assert!((s.top1 - 0.01).abs() <= 0.01, "{}", s.top1);
    assert!((s.top5 - 0.05).abs() <= 0.01, "{}", s.top5);
    assert!(s.top5 >= s.top1);
}

fn gaussian_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let t = Tensor::<f32>::randn(n, d, 1.0, rng);
    (0..n).map(|r| t.row(r).to_vec()).collect()
}

#[test]
fn shuffled_labels_give_chance_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = gaussian_rows(1000, 16, &mut rng);
    let xe = gaussian_rows(1000, 16, &mut rng);
    let y = ProbeLabels::Multiclass { labels: (0..1000).map(|_| rng.random_range(0..10)).collect(), n_classes: 10 };
    let ye = ProbeLabels::Multiclass { labels: (0..1000).map(|_| rng.random_range(0..10)).collect(), n_classes: 10 };
    let r = linear_probe("rand", &x, &y, &xe, &ye, &ProbeConfig::default()).unwrap();
    assert!((r.value - 0.1).abs() <= 0.03, "{}", r.value);
}

#[test]
fn map_ignores_monotone_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
    let pos: Vec<bool> = (0..50).map(|_| rng.random_bool(0.3)).collect();
    let a = average_precision(&scores, &pos).unwrap();
    let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect();
    assert_eq!(a, average_precision(&warped, &pos).unwrap());
}

#[test]
fn classes_without_training_positives_are_dropped_from_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian_rows(60, 4, &mut rng);
    let y: Vec<Vec<bool>> = x.iter().map(|r| vec![r[0] > 0.0, false, r[1] > 0.0]).collect();
    let r = linear_probe("l", &x, &ProbeLabels::Multilabel(y.clone()), &x, &ProbeLabels::Multilabel(y), &ProbeConfig::default()).unwrap();
    assert_eq!(r.metric, Metric::Map);
    assert!(r.value > 0.9, "{}", r.value);
}

#[test]
fn identity_attributes_reduce_to_the_multiclass_probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let centers = Tensor::<f32>::randn(5, 12, 1.0, &mut rng);
    let make = |n: usize, rng: &mut ChaCha8Rng| {
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
        let x = labels.iter().map(|&c| centers.row(c).iter().map(|v| v + rng.random_range(-1.5f32..1.5)).collect()).collect::<Vec<Vec<f32>>>();
        (x, labels)
    };
    let (x, y) = make(300, &mut rng);
    let (xe, ye) = make(300, &mut rng);
    let cfg = ProbeConfig { seed: 9, ..Default::default() };
    let probe = linear_probe(
        "l",
        &x,
        &ProbeLabels::Multiclass { labels: y.clone(), n_classes: 5 },
        &xe,
        &ProbeLabels::Multiclass { labels: ye.clone(), n_classes: 5 },
        &cfg,
    )
    .unwrap();
    let zs = zero_shot_eval(&x, &y, &xe, &ye, &AttributeMatrix::identity(5), &cfg).unwrap();
    assert_eq!(zs.top1, probe.value);
    assert!(probe.value > 0.5);
}

#[test]
fn unseen_attribute_combinations_beat_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n_shape, n_color) = (4, 6);
    let n_classes = n_shape * n_color;
    let mut a = Tensor::zeros(n_classes, n_shape + n_color);
    for c in 0..n_classes {
        a.set(c, c / n_color, 1.0);
        a.set(c, n_shape + c % n_color, 1.0);
    }
    let unseen = vec![5, 14];
    let seen: Vec<usize> = (0..n_classes).filter(|c| !unseen.contains(c)).collect();
    let attrs = AttributeMatrix::new(a.clone(), seen.clone(), unseen.clone()).unwrap();
    let proj = Tensor::<f64>::randn(n_shape + n_color, 16, 1.0, &mut rng);
    let sample = |c: usize, rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..16).map(|j| ((0..a.cols()).map(|k| a.at(c, k) * proj.at(k, j)).sum::<f64>() + rng.random_range(-0.3..0.3)) as f32).collect()
    };
    let ty: Vec<usize> = (0..600).map(|i| seen[i % seen.len()]).collect();
    let tx: Vec<Vec<f32>> = ty.iter().map(|&c| sample(c, &mut rng)).collect();
    let ey: Vec<usize> = (0..200).map(|i| unseen[i % 2]).collect();
    let ex: Vec<Vec<f32>> = ey.iter().map(|&c| sample(c, &mut rng)).collect();
    let r = zero_shot_eval(&tx, &ty, &ex, &ey, &attrs, &ProbeConfig::default()).unwrap();
    let unseen_acc = r.top1_unseen.unwrap();
    assert!(unseen_acc > 1.0 / n_classes as f64, "{unseen_acc}");

    let wrong = AttributeMatrix::new(Tensor::eye(3), vec![0], vec![1]).unwrap();
    assert!(zero_shot_eval(&tx, &ty, &ex, &ey, &wrong, &ProbeConfig::default()).is_err());
}

#[test]
fn localization_of_uniform_and_concentrated_maps() {
    let ds = generate_synthetic_with(30, 11, &SynthOptions { min_shapes: 1, max_shapes: 1, ..Default::default() });
    let uniform: Vec<AttentionMap> = ds
        .images
        .iter()
        .map(|im| AttentionMap { image_id: im.image_id.clone(), caption_id: format!("{}_c0", im.image_id), mask_index: 3, h: 8, w: 8, p: vec![1.0 / 64.0; 64] })
        .collect();
    let inside: Vec<AttentionMap> = uniform
        .iter()
        .map(|m| {
            let cells = ds.scenes[&m.image_id].shapes[0].bounding_cells(ds.image_size, 8);
            let mut p = vec![0.0; 64];
            for &(r, c) in &cells {
                p[r * 8 + c] = 1.0 / cells.len() as f64;
            }
            AttentionMap { p, ..m.clone() }
        })
        .collect();
    let expected: f64 = uniform.iter().map(|m| ds.scenes[&m.image_id].shapes[0].bounding_cells(ds.image_size, 8).len() as f64 / 64.0).sum::<f64>() / 30.0;
    let u = attention_localization_score(&uniform, &ds.scenes, ds.image_size).unwrap();
    assert!((u - expected).abs() < 1e-12);
    assert!((attention_localization_score(&inside, &ds.scenes, ds.image_size).unwrap() - 1.0).abs() < 1e-12);
    assert!(attention_localization_score(&uniform, &BTreeMap::new(), ds.image_size).is_err());

    let four = AttentionMap { image_id: "x".into(), caption_id: "x_c0".into(), mask_index: 3, h: 8, w: 8, p: vec![1.0 / 64.0; 64] };
    let four_cells = ds.scenes.values().flat_map(|s| s.shapes.iter()).find(|s| s.bounding_cells(ds.image_size, 8).len() == 4);
    if let Some(shape) = four_cells {
        let spec = icmlm::corpus::synthetic::SyntheticSceneSpec { shapes: vec![*shape], seed: 0 };
        assert!((in_box_mass(&four, &spec, ds.image_size).unwrap() - 0.0625).abs() < 1e-15);
    }
}
