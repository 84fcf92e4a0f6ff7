use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::caption::{MaskTriplet, TokenSequence};
use crate::corpus::Dataset;
use crate::error::{ensure, Error, Result};
use crate::text::TextEncoder;
use crate::trainer::TrainedModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtpScores {
    pub top1: f64,
    pub top5: f64,
    pub n_eval: usize,
}

/// Position of `target` when ids are sorted by descending probability,
/// equal probabilities ordered by id.
pub fn target_rank(probs: &[f32], target: usize) -> usize {
    let pt = probs[target];
    probs.iter().enumerate().filter(|&(i, &p)| p > pt || (p == pt && i < target)).count()
}

/// Top-1 and top-5 accuracy of per-triplet vocabulary distributions.
pub fn mtp_scores(probs: &[Vec<f32>], targets: &[usize]) -> Result<MtpScores> {
    ensure!(!targets.is_empty(), "masked token prediction needs at least one triplet");
    ensure!(probs.len() == targets.len(), "{} distributions for {} targets", probs.len(), targets.len());
    let (mut top1, mut top5) = (0usize, 0usize);
    for (p, &t) in probs.iter().zip(targets) {
        ensure!(t < p.len(), "target id {t} outside a vocabulary of {}", p.len());
        let r = target_rank(p, t);
        top1 += (r == 0) as usize;
        top5 += (r < 5) as usize;
    }
    let n = targets.len() as f64;
    Ok(MtpScores { top1: top1 as f64 / n, top5: top5 as f64 / n, n_eval: targets.len() })
}

/// Scores an image-conditioned model on held-out triplets.
pub fn eval_mtp(model: &TrainedModel, ds: &Dataset, seqs: &[TokenSequence], triplets: &[MaskTriplet]) -> Result<MtpScores> {
    ensure!(!triplets.is_empty(), "masked token prediction needs at least one triplet");
    let preds = model.predict_triplets(ds, seqs, triplets)?;
    let probs: Vec<Vec<f32>> = preds.into_iter().map(|p| p.probs).collect();
    mtp_scores(&probs, &triplets.iter().map(|t| t.target_vocab_id).collect::<Vec<_>>())
}

/// The same metric for the language model alone.
pub fn eval_mtp_text_only(lm: &TextEncoder, seqs: &[TokenSequence], triplets: &[MaskTriplet]) -> Result<MtpScores> {
    ensure!(!triplets.is_empty(), "masked token prediction needs at least one triplet");
    let by_id: HashMap<&str, &TokenSequence> = seqs.iter().map(|s| (s.caption_id.as_str(), s)).collect();
    let probs = triplets
        .iter()
        .map(|t| {
            let seq = by_id.get(t.caption_id.as_str()).ok_or_else(|| Error::Contract(format!("unknown caption `{}`", t.caption_id)))?;
            lm.predict_masked(&seq.tokens, t.mask_index)
        })
        .collect::<Result<Vec<_>>>()?;
    mtp_scores(&probs, &triplets.iter().map(|t| t.target_vocab_id).collect::<Vec<_>>())
}
