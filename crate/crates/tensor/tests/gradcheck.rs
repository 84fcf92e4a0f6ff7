//! Central finite differences against the tape for every operation.

use icmlm_tensor::{AttnSegment, ConvGeom, Graph, LseItem, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn check(params: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var) {
    let mut g = Graph::new();
    let loss = f(&mut g, params);
    g.backward(loss);
    let grads = g.param_grads();
    let eps = 1e-5;
    for (name, t) in params.iter() {
        let analytic = &grads[name];
        for i in 0..t.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let eval = |p: &ParamStore<f64>| {
                let mut g = Graph::inference();
                let l = f(&mut g, p);
                g.value(l).data()[0]
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(
                (a - fd).abs() / denom < 1e-5 || (a - fd).abs() < 1e-8,
                "{name}[{i}]: analytic {a} vs fd {fd}"
            );
        }
    }
}

fn store(entries: &[(&str, usize, usize)], seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    for &(n, r, c) in entries {
        p.insert(n, Tensor::randn(r, c, 1.0, &mut rng));
    }
    p
}

#[test]
fn matmul_variants_and_bias() {
    let p = store(&[("a", 3, 4), ("b", 4, 2), ("c", 2, 4), ("bias", 1, 2)], 1);
    check(&p, |g, p| {
        let a = p.bind(g, "a");
        let b = p.bind(g, "b");
        let c = p.bind(g, "c");
        let bias = p.bind(g, "bias");
        let x = g.matmul(a, b);
        let y = g.matmul_t(a, false, c, true);
        let z = g.matmul_t(b, true, a, true);
        let x = g.add_row_bias(x, bias);
        let xy = g.mul(x, y);
        let s1 = g.sum(xy);
        let zz = g.matmul_t(z, false, z, true);
        let s2 = g.sum(zz);
        let s2 = g.scale(s2, 0.1);
        g.add(s1, s2)
    });
}

#[test]
fn layer_norm_grouped_relu_softmax_lse() {
    let p = store(&[("x", 3, 6), ("gain", 1, 6), ("bias", 1, 6), ("w", 6, 6)], 2);
    check(&p, |g, p| {
        let x = p.bind(g, "x");
        let gain = p.bind(g, "gain");
        let bias = p.bind(g, "bias");
        let w = p.bind(g, "w");
        let h = g.layer_norm(x, gain, bias, 3);
        let h2 = g.layer_norm(x, gain, bias, 6);
        let h = g.add(h, h2);
        let h = g.relu(h);
        let h = g.matmul(h, w);
        let sm = g.softmax_rows(h);
        let lse = g.log_sum_exp_rows(h);
        let a = g.matmul(sm, w);
        let a = g.sum(a);
        let b = g.sum(lse);
        g.add(a, b)
    });
}

#[test]
fn structural_ops() {
    let p = store(&[("a", 4, 3), ("b", 2, 3), ("w", 3, 2)], 3);
    check(&p, |g, p| {
        let a = p.bind(g, "a");
        let b = p.bind(g, "b");
        let w = p.bind(g, "w");
        let cat = g.concat_rows(&[a, b, a]);
        let sl = g.slice_rows(cat, 3, 5);
        let sc = g.slice_cols(sl, 1, 2);
        let cc = g.concat_cols(&[sc, sl]);
        let gathered = g.gather_rows(cc, &[0, 4, 4, 2]);
        let r = g.reshape(gathered, 2, 10);
        let m = g.segment_mean(r, 2);
        let mw = g.matmul(sl, w);
        let mask = Tensor::from_vec(5, 2, vec![0.0, 2.0, 2.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 0.0]);
        let d = g.mul_const(mw, mask);
        let s1 = g.sum(m);
        let s2 = g.sum(d);
        let t = g.mul(s1, s2);
        g.add(t, s2)
    });
}

#[test]
fn conv2d_strided_and_unstrided() {
    let geom1 = ConvGeom { batch: 2, h: 4, w: 4, cin: 2, cout: 3, stride: 2 };
    let geom2 = ConvGeom { batch: 2, h: 2, w: 2, cin: 3, cout: 2, stride: 1 };
    let p = store(&[("x", 2 * 16, 2), ("w1", 18, 3), ("w2", 27, 2)], 4);
    check(&p, |g, p| {
        let x = p.bind(g, "x");
        let w1 = p.bind(g, "w1");
        let w2 = p.bind(g, "w2");
        let h = g.conv2d(x, w1, geom1);
        let h = g.conv2d(h, w2, geom2);
        let hh = g.mul(h, h);
        g.sum(hh)
    });
}

#[test]
fn soft_cross_entropy_with_soft_and_hard_targets() {
    let p = store(&[("logits", 3, 4)], 5);
    let targets = Tensor::from_vec(3, 4, vec![0.5, 0.0, 0.5, 0.0, 0.0, 0.0, 1.0, 0.0, 0.1, 0.2, 0.3, 0.4]);
    check(&p, move |g, p| {
        let l = p.bind(g, "logits");
        g.soft_cross_entropy(l, targets.clone())
    });
}

#[test]
fn conv_matches_direct_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let geom = ConvGeom { batch: 1, h: 5, w: 5, cin: 2, cout: 1, stride: 2 };
    let x = Tensor::<f64>::randn(25, 2, 1.0, &mut rng);
    let w = Tensor::<f64>::randn(18, 1, 1.0, &mut rng);
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv2d(xv, wv, geom);
    let y = g.value(y);
    assert_eq!(y.shape(), (9, 1));
    for oy in 0..3 {
        for ox in 0..3 {
            let mut acc = 0.0;
            for ky in 0..3i64 {
                for kx in 0..3i64 {
                    let iy = oy as i64 * 2 + ky - 1;
                    let ix = ox as i64 * 2 + kx - 1;
                    if !(0..5).contains(&iy) || !(0..5).contains(&ix) {
                        continue;
                    }
                    for c in 0..2 {
                        acc += x.at((iy * 5 + ix) as usize, c) * w.at(((ky * 3 + kx) * 2) as usize + c, 0);
                    }
                }
            }
            assert!((y.at(oy * 3 + ox, 0) - acc).abs() < 1e-12);
        }
    }
}

fn segments() -> Vec<AttnSegment> {
    vec![
        AttnSegment { queries: 0..2, rows: vec![0, 1, 2, 5] },
        AttnSegment { queries: 2..3, rows: vec![1, 3, 4] },
        AttnSegment { queries: 3..5, rows: vec![5, 0] },
    ]
}

#[test]
fn segment_attention_gradients() {
    let p = store(&[("r", 5, 6), ("c", 6, 6), ("v", 6, 4), ("w", 4, 3)], 10);
    check(&p, |g, p| {
        let r = p.bind(g, "r");
        let c = p.bind(g, "c");
        let v = p.bind(g, "v");
        let w = p.bind(g, "w");
        let o = g.segment_attention(r, c, v, &segments(), 2, 0.7);
        let o = g.matmul(o, w);
        let oo = g.mul(o, o);
        g.sum(oo)
    });
}

#[test]
fn segment_attention_matches_composed_ops() {
    let p = store(&[("r", 5, 6), ("c", 6, 6), ("v", 6, 4)], 11);
    let mut g = Graph::<f64>::new();
    let (r, c, v) = (p.bind(&mut g, "r"), p.bind(&mut g, "c"), p.bind(&mut g, "v"));
    let fused = g.segment_attention(r, c, v, &segments(), 2, 0.5);
    let mut parts = Vec::new();
    for seg in segments() {
        let rq = g.slice_rows(r, seg.queries.start, seg.queries.len());
        let cs = g.gather_rows(c, &seg.rows);
        let vs = g.gather_rows(v, &seg.rows);
        let mut heads = Vec::new();
        for h in 0..2 {
            let rh = g.slice_cols(rq, h * 3, 3);
            let ch = g.slice_cols(cs, h * 3, 3);
            let vh = g.slice_cols(vs, h * 2, 2);
            let s = g.matmul_t(rh, false, ch, true);
            let s = g.scale(s, 0.5);
            let a = g.softmax_rows(s);
            heads.push(g.matmul(a, vh));
        }
        parts.push(g.concat_cols(&heads));
    }
    let composed = g.concat_rows(&parts);
    for (x, y) in g.value(fused).data().iter().zip(g.value(composed).data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let probs = g.attention_probs(fused).unwrap();
    assert_eq!(probs.len(), 3);
    assert_eq!(probs[0].shape(), (4, 4));
    for t in probs {
        for r in 0..t.rows() {
            assert!((t.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn lse_scores_and_pool_rows_gradients() {
    let items = vec![
        LseItem { rows: 0..3, block: 0 },
        LseItem { rows: 3..4, block: 4 },
        LseItem { rows: 4..6, block: 0 },
    ];
    let p = store(&[("w", 6, 4), ("x", 8, 4), ("m", 2, 1)], 12);
    check(&p, |g, p| {
        let w = p.bind(g, "w");
        let x = p.bind(g, "x");
        let m = p.bind(g, "m");
        let s = g.lse_scores(w, x, &items, 4, 2, 0.8);
        let s = g.reshape(s, 12, 2);
        let s = g.matmul(s, m);
        let s = g.reshape(s, 3, 4);
        let a = g.softmax_rows(s);
        let pooled = g.pool_rows(a, x, &[0, 4, 0]);
        let pp = g.mul(pooled, pooled);
        g.sum(pp)
    });
}

#[test]
fn lse_scores_match_direct_evaluation() {
    let p = store(&[("w", 3, 4), ("x", 2, 4)], 13);
    let mut g = Graph::<f64>::inference();
    let (w, x) = (p.bind(&mut g, "w"), p.bind(&mut g, "x"));
    let s = g.lse_scores(w, x, &[LseItem { rows: 0..3, block: 0 }], 2, 2, 0.5);
    let (wv, xv) = (p.expect("w"), p.expect("x"));
    for cell in 0..2 {
        for h in 0..2 {
            let terms: Vec<f64> = (0..3)
                .map(|t| 0.5 * (0..2).map(|k| wv.at(t, h * 2 + k) * xv.at(cell, h * 2 + k)).sum::<f64>())
                .collect();
            let direct = terms.iter().map(|t| t.exp()).sum::<f64>().ln();
            assert!((g.value(s).at(0, cell * 2 + h) - direct).abs() < 1e-12);
        }
    }
}
