//! Target-task harness: masked token prediction, linear probes, zero-shot
//! attribute scoring and attention localization.

mod localize;
mod mtp;
mod probe;
mod synthetic;
mod zero_shot;

use std::path::Path;

use icmlm_tensor::ParamStore;

pub use localize::{attention_localization_score, in_box_mass, referenced_shape};
pub use mtp::{eval_mtp, eval_mtp_text_only, mtp_scores, target_rank, MtpScores};
pub use probe::{average_precision, linear_probe, render_table, Metric, ProbeConfig, ProbeLabels, ProbeResult};
pub use synthetic::{shape_color_attributes, shape_color_class, synthetic_labels, SyntheticTask, N_SHAPE_COLOR};
pub use zero_shot::{zero_shot_eval, AttributeMatrix, ZeroShotResult};

use crate::corpus::ImageRecord;
use crate::error::Result;
use crate::vision::{pool, Backbone, BackboneConfig, PoolMode};

/// Pooled features of the last three blocks: `(layer tag, one row per image)`.
pub fn pooled_features(backbone: &Backbone, params: &ParamStore<f32>, images: &[&ImageRecord], mode: PoolMode) -> Result<Vec<(String, Vec<Vec<f32>>)>> {
    let mut layers: Vec<(String, Vec<Vec<f32>>)> = Vec::new();
    for chunk in images.chunks(32) {
        for grids in backbone.forward(params, chunk)? {
            for (li, g) in grids.iter().enumerate() {
                if layers.len() <= li {
                    layers.push((g.layer_tag.clone(), Vec::new()));
                }
                layers[li].1.push(pool(g, mode, false));
            }
        }
    }
    Ok(layers)
}

/// The backbone a training run with `seed` starts from.
pub fn random_backbone(cfg: BackboneConfig, seed: u64) -> Result<(Backbone, ParamStore<f32>)> {
    use rand::SeedableRng;
    let backbone = Backbone::new(cfg)?;
    let mut params = ParamStore::new();
    backbone.init(&mut params, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    Ok((backbone, params))
}

pub fn write_results(path: &Path, results: &[ProbeResult]) -> Result<()> {
    crate::corpus::store::write_jsonl(path, results)
}
