use std::collections::HashMap;

use icmlm_tensor::{softmax, Graph, ParamStore};

use super::{build_model, Checkpoint, ModelDims, TrainConfig};
use crate::caption::{MaskTriplet, TokenSequence};
use crate::corpus::{Dataset, ImageRecord};
use crate::error::{ensure, Error, Result};
use crate::fusion::{AttentionMap, GridBatch, TextBatch};
use crate::registry::{Flavor, ProxyModel};
use crate::text::TextEncoder;
use crate::vision::{Backbone, FeatureGrid};

const CHUNK: usize = 32;

/// A masked caption to complete from an image.
#[derive(Clone, Copy, Debug)]
pub struct MaskQuery<'a> {
    pub image: &'a ImageRecord,
    pub caption_id: &'a str,
    /// Unmasked tokens; the one at `mask_index` is replaced by `[MASK]`.
    pub tokens: &'a [String],
    pub mask_index: usize,
}

#[derive(Clone, Debug)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub attention: AttentionMap,
}

/// A checkpoint prepared for inference.
pub struct TrainedModel {
    pub config: TrainConfig,
    pub dims: ModelDims,
    backbone: Backbone,
    model: Box<dyn ProxyModel<f32>>,
    params: ParamStore<f32>,
    lm: Option<TextEncoder>,
}

impl TrainedModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let backbone = Backbone::new(ckpt.config.backbone())?;
        let model = build_model(&ckpt.config, ckpt.dims, ckpt.lm.as_ref())?;
        Ok(TrainedModel {
            config: ckpt.config.clone(),
            dims: ckpt.dims,
            backbone,
            model,
            params: ckpt.params.clone(),
            lm: ckpt.lm.clone(),
        })
    }

    pub fn flavor(&self) -> Flavor {
        self.config.flavor
    }

    pub fn lm(&self) -> Option<&TextEncoder> {
        self.lm.as_ref()
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Last three block outputs per image.
    pub fn features(&self, images: &[&ImageRecord]) -> Result<Vec<Vec<FeatureGrid>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            out.extend(self.backbone.forward(&self.params, chunk)?);
        }
        Ok(out)
    }

    /// Vocabulary distribution and attention map for each query.
    pub fn predict(&self, queries: &[MaskQuery]) -> Result<Vec<Prediction>> {
        ensure!(self.flavor().is_icmlm(), "{} does not predict masked tokens", self.flavor());
        let lm = self.lm.as_ref().ok_or_else(|| Error::Config("checkpoint carries no language model".into()))?;
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(CHUNK) {
            let mut slot: HashMap<&str, usize> = HashMap::new();
            let mut images = Vec::new();
            for q in chunk {
                slot.entry(q.image.image_id.as_str()).or_insert_with(|| {
                    images.push(q.image);
                    images.len() - 1
                });
            }
            let feats = chunk.iter().map(|q| lm.encode(q.tokens, Some(q.mask_index))).collect::<Result<Vec<_>>>()?;
            let items: Vec<_> = chunk.iter().zip(&feats).map(|(q, f)| (slot[q.image.image_id.as_str()], &f.w, q.mask_index)).collect();
            let text = TextBatch::new(&items)?;

            let mut g = Graph::inference();
            let x = g.constant(self.backbone.stack_images::<f32>(&images)?);
            let gv = *self.backbone.forward_graph(&mut g, &self.params, x, images.len()).last().unwrap();
            let grid = GridBatch { var: gv.var, batch: images.len(), h: gv.h, w: gv.w, c: gv.c };
            let head = self.model.predict(&mut g, &self.params, grid, &text, None)?;
            let logits = g.value(head.logits);
            for (i, (q, att)) in chunk.iter().zip(head.attention).enumerate() {
                out.push(Prediction {
                    probs: softmax(logits.row(i)),
                    attention: AttentionMap {
                        image_id: q.image.image_id.clone(),
                        caption_id: q.caption_id.to_string(),
                        mask_index: q.mask_index,
                        h: gv.h,
                        w: gv.w,
                        p: att,
                    },
                });
            }
        }
        Ok(out)
    }

    /// `predict` over stored triplets, in their order.
    pub fn predict_triplets(&self, ds: &Dataset, seqs: &[TokenSequence], triplets: &[MaskTriplet]) -> Result<Vec<Prediction>> {
        let by_id: HashMap<&str, &TokenSequence> = seqs.iter().map(|s| (s.caption_id.as_str(), s)).collect();
        let queries = triplets
            .iter()
            .map(|t| {
                let seq = by_id.get(t.caption_id.as_str()).ok_or_else(|| Error::Contract(format!("unknown caption `{}`", t.caption_id)))?;
                let image = ds.image(&t.image_id).ok_or_else(|| Error::Contract(format!("unknown image `{}`", t.image_id)))?;
                Ok(MaskQuery { image, caption_id: &t.caption_id, tokens: &seq.tokens, mask_index: t.mask_index })
            })
            .collect::<Result<Vec<_>>>()?;
        self.predict(&queries)
    }
}
