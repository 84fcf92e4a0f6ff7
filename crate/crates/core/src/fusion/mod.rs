//! Heads that consume the visual grid and the frozen text features:
//! tag prediction, attention pooling with a classifier, and transformer fusion.

pub mod att;
pub mod export;
pub mod tfm;
pub mod tp;

use std::sync::Arc;

use icmlm_tensor::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use att::{att_pool, att_pool_single_head, att_scores, fc_classify, AttFcConfig};
pub use export::{render_heatmap, write_attention};
pub use tfm::{tfm_forward, tfm_forward_text_only, TfmConfig};
pub use tp::{tp_forward, TpConfig};

/// Shared read-only handle on the language model's token embedding table.
#[derive(Clone, Debug)]
pub struct VocabTable<F>(Arc<Tensor<F>>);

impl<F: Scalar> VocabTable<F> {
    pub fn new(table: Tensor<F>) -> Self {
        VocabTable(Arc::new(table))
    }

    pub fn tensor(&self) -> &Tensor<F> {
        &self.0
    }

    pub fn size(&self) -> usize {
        self.0.rows()
    }

    pub fn width(&self) -> usize {
        self.0.cols()
    }

    pub fn same_table(&self, other: &VocabTable<F>) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

/// The visual grid of a batch of images as a graph node.
#[derive(Clone, Copy, Debug)]
pub struct GridBatch {
    /// `(batch * h * w) x c`
    pub var: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl GridBatch {
    pub fn cells(&self) -> usize {
        self.h * self.w
    }
}

/// Masked captions paired with images of a `GridBatch`.
#[derive(Clone, Debug)]
pub struct TextBatch<F> {
    pub image: Vec<usize>,
    /// All caption features stacked, `sum(T_i) x d_w`.
    pub w: Tensor<F>,
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
    pub mask_index: Vec<usize>,
}

impl<F: Scalar> TextBatch<F> {
    /// Items are `(image index, T x d_w features, mask index)`.
    pub fn new(items: &[(usize, &Tensor<F>, usize)]) -> Result<Self> {
        ensure!(!items.is_empty(), "empty text batch");
        let d = items[0].1.cols();
        let mut offsets = Vec::with_capacity(items.len());
        let mut acc = 0;
        for (_, w, m) in items {
            ensure!(w.cols() == d, "text features have mixed widths");
            ensure!(*m < w.rows(), "mask_index {m} out of range for {} tokens", w.rows());
            offsets.push(acc);
            acc += w.rows();
        }
        let parts: Vec<&Tensor<F>> = items.iter().map(|i| i.1).collect();
        Ok(TextBatch {
            image: items.iter().map(|i| i.0).collect(),
            w: Tensor::concat_rows(&parts),
            offsets,
            lens: items.iter().map(|i| i.1.rows()).collect(),
            mask_index: items.iter().map(|i| i.2).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }
}

/// Vocabulary logits plus one attention distribution over grid cells per item.
pub struct HeadOutput {
    /// `items x |V|`
    pub logits: Var,
    pub attention: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub image_id: String,
    pub caption_id: String,
    pub mask_index: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major over cells.
    pub p: Vec<f64>,
}

impl AttentionMap {
    pub fn sum(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn grid(&self) -> Vec<Vec<f64>> {
        self.p.chunks(self.w).map(<[f64]>::to_vec).collect()
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.p[y * self.w + x]
    }
}
