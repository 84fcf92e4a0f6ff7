//! Tag-prediction and masked-token losses and their weighted combination.

use icmlm_tensor::{log_softmax, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

const LABEL_SUM_TOL: f64 = 1e-6;

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub l_tp: Option<f64>,
    pub l_mlm: Option<f64>,
    pub l_total: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl LossReport {
    pub fn new(step: u64, l_mlm: Option<f64>, l_tp: Option<f64>, lambda: f64, batch_size: usize, learning_rate: f64) -> Self {
        let l_total = match (l_mlm, l_tp) {
            (Some(m), Some(t)) => m + lambda * t,
            (Some(m), None) => m,
            (None, Some(t)) => t,
            (None, None) => 0.0,
        };
        LossReport { step, l_tp, l_mlm, l_total, lambda, batch_size, learning_rate }
    }
}

/// Mean over rows of `-sum_k y_k log softmax(logits)_k`.
pub fn tp_loss<F: Scalar>(logits: &Tensor<F>, labels: &Tensor<F>) -> Result<f64> {
    ensure!(logits.shape() == labels.shape(), "logits {:?} and labels {:?} differ in shape", logits.shape(), labels.shape());
    ensure!(logits.rows() > 0, "tag loss over an empty batch");
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let y = labels.row(r);
        let s: f64 = y.iter().map(|v| v.as_f64()).sum();
        ensure!(
            (s - 1.0).abs() <= LABEL_SUM_TOL && y.iter().all(|v| v.as_f64() >= 0.0),
            "label row {r} is not a distribution (sum {s})"
        );
        let ls = log_softmax(logits.row(r));
        total -= y.iter().zip(&ls).map(|(a, b)| a.as_f64() * b.as_f64()).sum::<f64>();
    }
    Ok(total / logits.rows() as f64)
}

/// Mean over rows of `-log probs[r, targets[r]]`.
pub fn mlm_loss<F: Scalar>(probs: &Tensor<F>, targets: &[usize]) -> Result<f64> {
    ensure!(probs.rows() == targets.len(), "{} probability rows for {} targets", probs.rows(), targets.len());
    ensure!(!targets.is_empty(), "masked-token loss over an empty batch");
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        ensure!(t < probs.cols(), "target id {t} out of range for a vocabulary of {}", probs.cols());
        total -= probs.at(r, t).as_f64().ln();
    }
    Ok(total / targets.len() as f64)
}

/// `-log softmax(logits)[target]` averaged over rows, without forming the
/// probabilities.
pub fn mlm_loss_from_logits<F: Scalar>(logits: &Tensor<F>, targets: &[usize]) -> Result<f64> {
    ensure!(logits.rows() == targets.len(), "{} logit rows for {} targets", logits.rows(), targets.len());
    ensure!(!targets.is_empty(), "masked-token loss over an empty batch");
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        ensure!(t < logits.cols(), "target id {t} out of range for a vocabulary of {}", logits.cols());
        total -= log_softmax(logits.row(r))[t].as_f64();
    }
    Ok(total / targets.len() as f64)
}

pub fn combined_loss(l_mlm: f64, l_tp: f64, lambda: f64) -> Result<f64> {
    ensure!(lambda >= 0.0, "lambda must be non-negative, got {lambda}");
    Ok(l_mlm + lambda * l_tp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tp_loss_analytic_cases() {
        let uniform = Tensor::<f64>::zeros(1, 4);
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]);
        assert!((tp_loss(&uniform, &onehot).unwrap() - 4f64.ln()).abs() < 1e-12);
        let soft = Tensor::from_rows(&[vec![0.5, 0.0, 0.5, 0.0]]);
        assert!((tp_loss(&uniform, &soft).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(tp_loss(&uniform, &Tensor::from_rows(&[vec![1.0, 1.0, 0.0, 0.0]])).is_err());

        let logits = Tensor::from_rows(&[vec![0.3, -1.2, 2.0, 0.1]]);
        let shifted = logits.map(|v| v + 7.5);
        let p: Vec<f64> = icmlm_tensor::softmax(logits.row(0));
        let target = Tensor::from_rows(&[p.clone()]);
        let entropy: f64 = -p.iter().map(|q| q * q.ln()).sum::<f64>();
        assert!((tp_loss(&logits, &target).unwrap() - entropy).abs() < 1e-12);
        assert!((tp_loss(&shifted, &target).unwrap() - entropy).abs() < 1e-12);
    }

    #[test]
    fn mlm_loss_analytic_cases() {
        let uniform = Tensor::<f64>::filled(3, 100, 0.01);
        assert!((mlm_loss(&uniform, &[0, 5, 99]).unwrap() - 100f64.ln()).abs() < 1e-12);
        let mut perfect = Tensor::<f64>::zeros(1, 3);
        perfect.set(0, 2, 1.0);
        assert_eq!(mlm_loss(&perfect, &[2]).unwrap(), 0.0);
        let two = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.25, 0.75]]);
        let expect = (-(0.5f64.ln()) - 0.25f64.ln()) / 2.0;
        assert!((mlm_loss(&two, &[0, 0]).unwrap() - expect).abs() < 1e-15);
        assert!(mlm_loss(&two, &[0, 2]).is_err());
    }

    #[test]
    fn moving_mass_to_the_target_lowers_the_loss() {
        let a = Tensor::from_rows(&[vec![0.2, 0.5, 0.3]]);
        let b = Tensor::from_rows(&[vec![0.3, 0.4, 0.3]]);
        assert!(mlm_loss(&b, &[0]).unwrap() < mlm_loss(&a, &[0]).unwrap());
    }

    #[test]
    fn combination() {
        assert_eq!(combined_loss(2.0, 1.0, 1.0).unwrap(), 3.0);
        assert_eq!(combined_loss(2.0, 1.0, 0.0).unwrap(), 2.0);
        assert!(combined_loss(2.0, 1.0, -0.1).is_err());
        let r = LossReport::new(0, Some(2.0), Some(0.5), 0.1, 4, 0.1);
        assert_eq!(r.l_total, 2.0 + 0.1 * 0.5);
    }
}
