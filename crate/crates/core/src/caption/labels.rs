use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::concepts::ConceptSet;
use super::tokenize::TokenSequence;
use crate::corpus::store::{read_jsonl, write_jsonl};
use crate::corpus::Dataset;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelVector {
    pub image_id: String,
    pub y: Vec<f64>,
}

impl LabelVector {
    pub fn sum(&self) -> f64 {
        self.y.iter().sum()
    }
}

/// Divides a presence vector by its sum; `None` for an all-zero vector.
pub fn normalize(presence: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = presence.iter().sum();
    (s > 0.0).then(|| presence.iter().map(|v| v / s).collect())
}

/// Normalized label vectors in image order, plus images left without any label.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelSet {
    pub k: usize,
    pub vectors: Vec<LabelVector>,
    pub excluded: Vec<String>,
}

impl LabelSet {
    pub fn get(&self, image_id: &str) -> Option<&LabelVector> {
        self.vectors
            .binary_search_by(|v| v.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.vectors[i])
    }

    fn from_presence(k: usize, presence: BTreeMap<String, Vec<f64>>) -> Self {
        let mut out = LabelSet { k, ..Default::default() };
        for (image_id, p) in presence {
            match normalize(&p) {
                Some(y) => out.vectors.push(LabelVector { image_id, y }),
                None => out.excluded.push(image_id),
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let rows: Vec<LabelRow> = self.vectors.iter().map(|v| LabelRow::dense(v)).collect();
        write_jsonl(path, &rows)
    }

    /// Reads dense (`"y": [..]`) or sparse (`"y": [[index, weight], ..]`) rows.
    pub fn load(path: &Path) -> Result<Self> {
        let rows: Vec<LabelRow> = read_jsonl(path)?;
        let mut out = LabelSet::default();
        for (i, row) in rows.into_iter().enumerate() {
            let bad = |msg: String| Error::Ingest { path: path.into(), line: i + 1, msg };
            let y = match row.y {
                Weights::Dense(y) => y,
                Weights::Sparse(pairs) => {
                    let k = row.k.ok_or_else(|| bad("sparse label row needs `k`".into()))?;
                    let mut y = vec![0.0; k];
                    for (j, w) in pairs {
                        *y.get_mut(j).ok_or_else(|| bad(format!("index {j} out of range")))? = w;
                    }
                    y
                }
            };
            if out.vectors.is_empty() {
                out.k = y.len();
            } else if y.len() != out.k {
                return Err(bad(format!("expected {} labels, found {}", out.k, y.len())));
            }
            out.vectors.push(LabelVector { image_id: row.image_id, y });
        }
        out.vectors.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(out)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Weights {
    Dense(Vec<f64>),
    Sparse(Vec<(usize, f64)>),
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    k: Option<usize>,
    y: Weights,
}

impl LabelRow {
    fn dense(v: &LabelVector) -> Self {
        LabelRow { image_id: v.image_id.clone(), k: None, y: Weights::Dense(v.y.clone()) }
    }
}

/// Presence of each concept token in any caption of the image, normalized.
pub fn build_postag_labels(ds: &Dataset, seqs: &[TokenSequence], cs: &ConceptSet) -> LabelSet {
    let k = cs.len();
    let mut presence: BTreeMap<String, Vec<f64>> =
        ds.images.iter().map(|im| (im.image_id.clone(), vec![0.0; k])).collect();
    for s in seqs {
        let Some(p) = presence.get_mut(&s.image_id) else { continue };
        for t in &s.tokens {
            if let Some(j) = cs.index_of(t) {
                p[j] = 1.0;
            }
        }
    }
    LabelSet::from_presence(k, presence)
}

/// Union of the cluster one-hots of an image's captions, normalized.
/// `assignments[i]` is the cluster of `seqs[i]`.
pub fn build_cluster_labels(ds: &Dataset, seqs: &[TokenSequence], assignments: &[usize], k: usize) -> Result<LabelSet> {
    ensure!(seqs.len() == assignments.len(), "{} captions but {} assignments", seqs.len(), assignments.len());
    let mut presence: BTreeMap<String, Vec<f64>> =
        ds.images.iter().map(|im| (im.image_id.clone(), vec![0.0; k])).collect();
    for (s, &a) in seqs.iter().zip(assignments) {
        ensure!(a < k, "cluster id {a} out of range for k={k}");
        if let Some(p) = presence.get_mut(&s.image_id) {
            p[a] = 1.0;
        }
    }
    Ok(LabelSet::from_presence(k, presence))
}
