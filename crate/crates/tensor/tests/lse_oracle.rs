//! Log-sum-exp against 50-digit values from `fixtures/gen_lse_oracle.py`.

use icmlm_tensor::{log_sum_exp, Graph, LseItem, Tensor};
use serde_json::Value;

const MAX_REL: f64 = 1e-10;

/// Same stream as the generator script.
fn inputs(seed: u64, n: usize, magnitude: f64, shift: f64) -> Vec<f64> {
    let mut state = seed;
    (0..n)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            ((z >> 11) as f64 * 2f64.powi(-53) * 2.0 - 1.0) * magnitude + shift
        })
        .collect()
}

struct Case {
    xs: Vec<f64>,
    oracle: f64,
}

fn cases() -> Vec<Case> {
    let text = include_str!("fixtures/lse_oracle.json");
    let doc: Value = serde_json::from_str(text).unwrap();
    doc["cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| Case {
            xs: inputs(c["seed"].as_u64().unwrap(), c["n"].as_u64().unwrap() as usize, c["magnitude"].as_f64().unwrap(), c["shift"].as_f64().unwrap()),
            oracle: c["lse"].as_str().unwrap().parse().unwrap(),
        })
        .collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn fixture_covers_sizes_up_to_ten_thousand() {
    let cs = cases();
    assert_eq!(cs.len(), 42);
    assert_eq!(cs.iter().map(|c| c.xs.len()).max(), Some(10_000));
    assert!(cs.iter().any(|c| c.xs.iter().any(|x| x.abs() > 9_000.0)));
}

#[test]
fn slice_lse_matches_the_oracle() {
    for c in cases() {
        let got = log_sum_exp(&c.xs);
        assert!(rel(got, c.oracle) <= MAX_REL, "n={} got {got} oracle {}", c.xs.len(), c.oracle);
    }
}

#[test]
fn graph_lse_ops_match_the_oracle() {
    for c in cases() {
        let n = c.xs.len();
        let mut g = Graph::<f64>::inference();
        let row = g.constant(Tensor::from_vec(1, n, c.xs.clone()));
        let s = g.log_sum_exp_rows(row);
        assert!(rel(g.value(s).data()[0], c.oracle) <= MAX_REL);

        // One-dimensional features against a unit cell give the raw scores.
        let w = g.constant(Tensor::from_vec(n, 1, c.xs.clone()));
        let x = g.constant(Tensor::from_vec(1, 1, vec![1.0]));
        let fused = g.lse_scores(w, x, &[LseItem { rows: 0..n, block: 0 }], 1, 1, 1.0);
        assert!(rel(g.value(fused).data()[0], c.oracle) <= MAX_REL, "fused n={n}");
    }
}
