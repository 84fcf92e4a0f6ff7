//! Bilinear compatibility `f(x, a) = a^T (S x + b)` between features and
//! class attribute vectors.

use icmlm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::probe::{class_scores, fit_linear, Loss, ProbeConfig, Standardizer};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AttributeMatrix {
    /// `n_classes x n_attr`
    pub a: Tensor<f64>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

impl AttributeMatrix {
    pub fn new(a: Tensor<f64>, seen: Vec<usize>, unseen: Vec<usize>) -> Result<Self> {
        let n = a.rows();
        ensure!(seen.iter().chain(&unseen).all(|&c| c < n), "class id outside the attribute matrix");
        ensure!(!seen.iter().any(|c| unseen.contains(c)), "seen and unseen classes overlap");
        ensure!(!seen.is_empty(), "no seen classes");
        Ok(AttributeMatrix { a, seen, unseen })
    }

    /// One-hot attributes with every class seen.
    pub fn identity(n_classes: usize) -> Self {
        AttributeMatrix { a: Tensor::eye(n_classes), seen: (0..n_classes).collect(), unseen: Vec::new() }
    }

    pub fn n_classes(&self) -> usize {
        self.a.rows()
    }

    pub fn n_attr(&self) -> usize {
        self.a.cols()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotResult {
    /// Accuracy over all evaluation samples, predicting among all classes.
    pub top1: f64,
    pub top1_seen: Option<f64>,
    pub top1_unseen: Option<f64>,
    pub n_eval: usize,
}

/// Learns `S` and `b` on seen-class samples by softmax cross-entropy over the
/// seen classes, then predicts `argmax_c f(x, A_c)` over every class.
pub fn zero_shot_eval(
    train_x: &[Vec<f32>],
    train_y: &[usize],
    eval_x: &[Vec<f32>],
    eval_y: &[usize],
    attrs: &AttributeMatrix,
    cfg: &ProbeConfig,
) -> Result<ZeroShotResult> {
    ensure!(!train_x.is_empty() && !eval_x.is_empty(), "zero-shot evaluation needs samples in both splits");
    ensure!(train_x.len() == train_y.len() && eval_x.len() == eval_y.len(), "feature and label counts differ");
    let d = train_x[0].len();
    ensure!(train_x.iter().chain(eval_x).all(|r| r.len() == d), "feature rows differ in width");
    ensure!(eval_y.iter().all(|&c| c < attrs.n_classes()), "evaluation class outside the attribute matrix");
    let seen_pos = |c: usize| attrs.seen.iter().position(|&s| s == c);
    let local = train_y
        .iter()
        .map(|&c| seen_pos(c).ok_or_else(|| crate::Error::Contract(format!("training sample of class {c}, which is not seen"))))
        .collect::<Result<Vec<_>>>()?;
    let seen_rows: Vec<&[f64]> = attrs.seen.iter().map(|&c| attrs.a.row(c)).collect();
    let a_seen = Tensor::from_vec(attrs.seen.len(), attrs.n_attr(), seen_rows.concat());

    let rows = |x: &[Vec<f32>]| -> Vec<Vec<f64>> { x.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect() };
    let train_rows = rows(train_x);
    let std = Standardizer::fit(&train_rows);
    let xt = std.apply(&train_rows);
    let lin = fit_linear(&xt, attrs.n_attr(), &Loss::Softmax { labels: &local, attrs: Some(&a_seen) }, cfg);
    let s = class_scores(&lin, &std.apply(&rows(eval_x)), Some(&attrs.a));
    let pred: Vec<usize> = (0..s.rows()).map(|r| s.argmax_row(r)).collect();
    let acc = |keep: &dyn Fn(usize) -> bool| -> Option<f64> {
        let idx: Vec<usize> = (0..eval_y.len()).filter(|&i| keep(eval_y[i])).collect();
        (!idx.is_empty()).then(|| idx.iter().filter(|&&i| pred[i] == eval_y[i]).count() as f64 / idx.len() as f64)
    };
    Ok(ZeroShotResult {
        top1: acc(&|_| true).unwrap_or(0.0),
        top1_seen: acc(&|c| attrs.seen.contains(&c)),
        top1_unseen: acc(&|c| attrs.unseen.contains(&c)),
        n_eval: eval_y.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_and_training_on_unseen_are_rejected() {
        assert!(AttributeMatrix::new(Tensor::eye(3), vec![0, 1], vec![1]).is_err());
        let a = AttributeMatrix::new(Tensor::eye(3), vec![0, 1], vec![2]).unwrap();
        let x = vec![vec![0.0f32, 1.0]; 3];
        assert!(zero_shot_eval(&x, &[0, 1, 2], &x, &[0, 1, 2], &a, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn identical_features_predict_one_class() {
        let x = vec![vec![0.5f32, 0.5]; 6];
        let y = [0, 0, 0, 1, 1, 2];
        let r = zero_shot_eval(&x, &y, &x, &y, &AttributeMatrix::identity(3), &ProbeConfig { epochs: 5, ..Default::default() }).unwrap();
        assert!((r.top1 - 0.5).abs() < 1e-12, "{}", r.top1);
    }
}
