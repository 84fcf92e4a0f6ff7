use std::collections::BTreeMap;

use crate::corpus::synthetic::{PlacedShape, SyntheticSceneSpec};
use crate::error::{ensure, Error, Result};
use crate::fusion::AttentionMap;

/// The shape a masked caption token refers to. Caption `c{j}` of an image
/// describes shape `j`; the scene caption lists them five tokens apart.
pub fn referenced_shape<'a>(map: &AttentionMap, spec: &'a SyntheticSceneSpec) -> Result<&'a PlacedShape> {
    let j = map
        .caption_id
        .rsplit_once("_c")
        .and_then(|(_, j)| j.parse::<usize>().ok())
        .ok_or_else(|| Error::Contract(format!("caption id `{}` is not a synthetic caption", map.caption_id)))?;
    let n = spec.shapes.len();
    let idx = if j < n { j } else { (map.mask_index.saturating_sub(3) / 5).min(n - 1) };
    Ok(&spec.shapes[idx])
}

/// Attention mass inside the bounding cells of the referenced shape.
pub fn in_box_mass(map: &AttentionMap, spec: &SyntheticSceneSpec, image_size: usize) -> Result<f64> {
    ensure!(map.h == map.w && map.h > 0, "attention map of image {} is not square", map.image_id);
    ensure!(map.p.len() == map.h * map.w, "attention map of image {} has {} cells, expected {}", map.image_id, map.p.len(), map.h * map.w);
    let shape = referenced_shape(map, spec)?;
    Ok(shape.bounding_cells(image_size, map.h).into_iter().map(|(r, c)| map.at(r, c)).sum())
}

/// Mean in-box attention mass over `maps`.
pub fn attention_localization_score(maps: &[AttentionMap], specs: &BTreeMap<String, SyntheticSceneSpec>, image_size: usize) -> Result<f64> {
    ensure!(!maps.is_empty(), "no attention maps to score");
    let mut total = 0.0;
    for m in maps {
        let spec = specs.get(&m.image_id).ok_or_else(|| Error::Contract(format!("no scene layout for image {}", m.image_id)))?;
        total += in_box_mass(m, spec, image_size)?;
    }
    Ok(total / maps.len() as f64)
}
