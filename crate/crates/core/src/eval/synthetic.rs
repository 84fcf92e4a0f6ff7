//! Probe and zero-shot targets read off synthetic scene layouts.

use icmlm_tensor::Tensor;
use serde::{Deserialize, Serialize};

use super::ProbeLabels;
use crate::corpus::synthetic::{Color, PlacedShape, ShapeKind};
use crate::corpus::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Shape of a single-shape scene.
    Shape,
    /// Color of a single-shape scene.
    Color,
    /// Joint shape and color, `shape * 6 + color`.
    ShapeColor,
    /// Presence of every shape kind and color (multi-label).
    Tags,
}

impl std::str::FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shape" => Ok(SyntheticTask::Shape),
            "color" => Ok(SyntheticTask::Color),
            "shape_color" => Ok(SyntheticTask::ShapeColor),
            "tags" => Ok(SyntheticTask::Tags),
            _ => Err(Error::Config(format!("unknown task `{s}` (available: shape, color, shape_color, tags)"))),
        }
    }
}

pub const N_SHAPE_COLOR: usize = ShapeKind::ALL.len() * Color::ALL.len();

pub fn shape_color_class(s: &PlacedShape) -> usize {
    s.shape.index() * Color::ALL.len() + s.color.index()
}

/// `[one-hot shape | one-hot color]` for every joint class.
pub fn shape_color_attributes() -> Tensor<f64> {
    let (ns, nc) = (ShapeKind::ALL.len(), Color::ALL.len());
    let mut a = Tensor::zeros(ns * nc, ns + nc);
    for c in 0..ns * nc {
        a.set(c, c / nc, 1.0);
        a.set(c, ns + c % nc, 1.0);
    }
    a
}

/// Labels for every image of `ds`, in dataset order.
pub fn synthetic_labels(ds: &Dataset, task: SyntheticTask) -> Result<ProbeLabels> {
    let mut single = Vec::with_capacity(ds.images.len());
    let mut tags = Vec::with_capacity(ds.images.len());
    for im in &ds.images {
        let spec = ds.scenes.get(&im.image_id).ok_or_else(|| Error::Contract(format!("no scene layout for image {}", im.image_id)))?;
        match task {
            SyntheticTask::Tags => {
                let mut row = vec![false; ShapeKind::ALL.len() + Color::ALL.len()];
                for s in &spec.shapes {
                    row[s.shape.index()] = true;
                    row[ShapeKind::ALL.len() + s.color.index()] = true;
                }
                tags.push(row);
            }
            _ => {
                let [s] = spec.shapes.as_slice() else {
                    return Err(Error::Contract(format!("image {} has {} shapes; {task:?} needs exactly one", im.image_id, spec.shapes.len())));
                };
                single.push(match task {
                    SyntheticTask::Shape => s.shape.index(),
                    SyntheticTask::Color => s.color.index(),
                    _ => shape_color_class(s),
                });
            }
        }
    }
    Ok(match task {
        SyntheticTask::Tags => ProbeLabels::Multilabel(tags),
        SyntheticTask::Shape => ProbeLabels::Multiclass { labels: single, n_classes: ShapeKind::ALL.len() },
        SyntheticTask::Color => ProbeLabels::Multiclass { labels: single, n_classes: Color::ALL.len() },
        SyntheticTask::ShapeColor => ProbeLabels::Multiclass { labels: single, n_classes: N_SHAPE_COLOR },
    })
}
