//! Linear classifiers on frozen features.

use std::f64::consts::PI;

use icmlm_tensor::{softmax_in_place, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Top1,
    Top5,
    #[serde(rename = "mAP")]
    Map,
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Metric::Top1 => "top1",
            Metric::Top5 => "top5",
            Metric::Map => "mAP",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub layer_tag: String,
    pub metric: Metric,
    /// Fraction in `[0, 1]`.
    pub value: f64,
    pub n_eval: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { learning_rate: 0.1, weight_decay: 1e-5, epochs: 100, batch_size: 64, momentum: 0.9, seed: 0 }
    }
}

/// Labels of a probe split.
#[derive(Clone, Debug)]
pub enum ProbeLabels {
    /// One class id per sample.
    Multiclass { labels: Vec<usize>, n_classes: usize },
    /// `n x classes` indicator matrix.
    Multilabel(Vec<Vec<bool>>),
}

impl ProbeLabels {
    fn len(&self) -> usize {
        match self {
            ProbeLabels::Multiclass { labels, .. } => labels.len(),
            ProbeLabels::Multilabel(rows) => rows.len(),
        }
    }
}

/// Per-feature mean and standard deviation of the training split.
#[derive(Clone, Debug)]
pub(crate) struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    pub(crate) fn fit(x: &[Vec<f64>]) -> Self {
        let d = x.first().map_or(0, Vec::len);
        let n = x.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for row in x {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var.iter().map(|s| if *s > 0.0 { 1.0 / (s / n).sqrt() } else { 0.0 }).collect();
        Standardizer { mean, inv_std }
    }

    pub(crate) fn apply(&self, x: &[Vec<f64>]) -> Tensor<f64> {
        let d = self.mean.len();
        let mut data = Vec::with_capacity(x.len() * d);
        for row in x {
            data.extend(row.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s));
        }
        Tensor::from_vec(x.len(), d, data)
    }
}

pub(crate) enum Loss<'a> {
    /// Softmax cross-entropy; scores are mapped through `attrs^T` when given.
    Softmax { labels: &'a [usize], attrs: Option<&'a Tensor<f64>> },
    /// Independent sigmoid cross-entropy per output.
    Sigmoid { labels: &'a [Vec<bool>] },
}

/// `x W + b`, all in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Linear {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl Linear {
    pub(crate) fn scores(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let mut s = x.matmul(false, &self.w, false);
        for r in 0..s.rows() {
            for (v, b) in s.row_mut(r).iter_mut().zip(self.b.data()) {
                *v += b;
            }
        }
        s
    }
}

pub(crate) fn class_scores(lin: &Linear, x: &Tensor<f64>, attrs: Option<&Tensor<f64>>) -> Tensor<f64> {
    let s = lin.scores(x);
    match attrs {
        Some(a) => s.matmul(false, a, true),
        None => s,
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Minibatch SGD with momentum and a cosine learning rate, starting from zero
/// weights.
pub(crate) fn fit_linear(x: &Tensor<f64>, outputs: usize, loss: &Loss, cfg: &ProbeConfig) -> Linear {
    let (n, d) = x.shape();
    let mut lin = Linear { w: Tensor::zeros(d, outputs), b: Tensor::zeros(1, outputs) };
    let mut vel = Linear { w: Tensor::zeros(d, outputs), b: Tensor::zeros(1, outputs) };
    let bs = cfg.batch_size.max(1).min(n.max(1));
    let per_epoch = n.div_ceil(bs);
    let total = (per_epoch * cfg.epochs).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(bs) {
            let rows: Vec<&[f64]> = chunk.iter().map(|&i| x.row(i)).collect();
            let xb = Tensor::from_vec(chunk.len(), d, rows.concat());
            let mut g = match loss {
                Loss::Softmax { labels, attrs } => {
                    let mut p = class_scores(&lin, &xb, *attrs);
                    for (r, &i) in chunk.iter().enumerate() {
                        let row = p.row_mut(r);
                        softmax_in_place(row);
                        row[labels[i]] -= 1.0;
                    }
                    match attrs {
                        Some(a) => p.matmul(false, a, false),
                        None => p,
                    }
                }
                Loss::Sigmoid { labels } => {
                    let mut s = lin.scores(&xb);
                    for (r, &i) in chunk.iter().enumerate() {
                        for (v, &y) in s.row_mut(r).iter_mut().zip(&labels[i]) {
                            *v = sigmoid(*v) - if y { 1.0 } else { 0.0 };
                        }
                    }
                    s
                }
            };
            g.scale(1.0 / chunk.len() as f64);
            let mut dw = xb.matmul(true, &g, false);
            dw.axpy(cfg.weight_decay, &lin.w);
            let mut db = Tensor::zeros(1, outputs);
            for r in 0..g.rows() {
                for (acc, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            let lr = 0.5 * cfg.learning_rate * (1.0 + (PI * step as f64 / total as f64).cos());
            for (v, gr, p) in [(&mut vel.w, &dw, &mut lin.w), (&mut vel.b, &db, &mut lin.b)] {
                v.scale(cfg.momentum);
                v.add_assign(gr);
                p.axpy(-lr, v);
            }
            step += 1;
        }
    }
    lin
}

/// Average precision with every positive contributing the precision at its
/// rank; `None` without positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(positive[a].cmp(&positive[b])));
    let mut hits = 0;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

fn to_rows(x: &[Vec<f32>]) -> Vec<Vec<f64>> {
    x.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn check_split(x: &[Vec<f32>], y: &ProbeLabels, d: usize) -> Result<()> {
    ensure!(!x.is_empty(), "probe split is empty");
    ensure!(x.len() == y.len(), "{} feature rows for {} labels", x.len(), y.len());
    ensure!(x.iter().all(|r| r.len() == d), "feature rows differ in width");
    Ok(())
}

/// Trains on `train` and reports top-1 (multiclass) or mAP (multilabel) on
/// `eval`.
pub fn linear_probe(
    layer_tag: &str,
    train_x: &[Vec<f32>],
    train_y: &ProbeLabels,
    eval_x: &[Vec<f32>],
    eval_y: &ProbeLabels,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let d = train_x.first().map_or(0, Vec::len);
    check_split(train_x, train_y, d)?;
    check_split(eval_x, eval_y, d)?;
    let train_rows = to_rows(train_x);
    let std = Standardizer::fit(&train_rows);
    let xt = std.apply(&train_rows);
    let xe = std.apply(&to_rows(eval_x));
    match (train_y, eval_y) {
        (ProbeLabels::Multiclass { labels, n_classes }, ProbeLabels::Multiclass { labels: eval_labels, n_classes: ne }) => {
            ensure!(n_classes == ne, "train and eval splits disagree on the class count");
            ensure!(labels.iter().chain(eval_labels).all(|&c| c < *n_classes), "class id out of range");
            let lin = fit_linear(&xt, *n_classes, &Loss::Softmax { labels, attrs: None }, cfg);
            let s = lin.scores(&xe);
            let hits = (0..s.rows()).filter(|&r| s.argmax_row(r) == eval_labels[r]).count();
            Ok(ProbeResult { layer_tag: layer_tag.into(), metric: Metric::Top1, value: hits as f64 / s.rows() as f64, n_eval: s.rows() })
        }
        (ProbeLabels::Multilabel(labels), ProbeLabels::Multilabel(eval_labels)) => {
            let k = labels[0].len();
            ensure!(labels.iter().chain(eval_labels).all(|r| r.len() == k), "label rows differ in width");
            let lin = fit_linear(&xt, k, &Loss::Sigmoid { labels }, cfg);
            let s = lin.scores(&xe);
            let mut aps = Vec::new();
            for c in 0..k {
                if !labels.iter().any(|r| r[c]) {
                    tracing::warn!(class = c, "class has no training positives; excluded from mAP");
                    continue;
                }
                let col: Vec<f64> = (0..s.rows()).map(|r| s.at(r, c)).collect();
                let pos: Vec<bool> = eval_labels.iter().map(|r| r[c]).collect();
                match average_precision(&col, &pos) {
                    Some(ap) => aps.push(ap),
                    None => tracing::warn!(class = c, "class has no evaluation positives; excluded from mAP"),
                }
            }
            ensure!(!aps.is_empty(), "no class has positives in both splits");
            let value = aps.iter().sum::<f64>() / aps.len() as f64;
            Ok(ProbeResult { layer_tag: layer_tag.into(), metric: Metric::Map, value, n_eval: s.rows() })
        }
        _ => Err(crate::Error::Contract("train and eval labels are of different kinds".into())),
    }
}

/// Aligned plain-text summary, values in percent.
pub fn render_table(results: &[ProbeResult]) -> String {
    let w = results.iter().map(|r| r.layer_tag.len()).max().unwrap_or(0).max("layer".len());
    let mut out = format!("{:<w$}  {:<6}  {:>7}  {:>7}\n", "layer", "metric", "value", "n_eval");
    for r in results {
        out.push_str(&format!("{:<w$}  {:<6}  {:>7.2}  {:>7}\n", r.layer_tag, r.metric.to_string(), 100.0 * r.value, r.n_eval));
    }
    out
}
