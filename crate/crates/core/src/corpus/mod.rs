//! Image–caption records, ingestion, persistence and the synthetic scene
//! generator.

pub(crate) mod store;
pub mod synthetic;

use std::collections::BTreeMap;

use icmlm_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub use store::{load_dataset, load_manifest, save_dataset, DATASET_FORMAT_VERSION};
pub use synthetic::{generate_synthetic, generate_synthetic_with, SynthOptions, SyntheticSceneSpec};

/// Default edge length, in pixels, of every image.
pub const DEFAULT_IMAGE_SIZE: usize = 64;

/// A square RGB image stored as 8-bit channels; values read back in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub size: usize,
    /// Row-major, channel-interleaved RGB, `size * size * 3` bytes.
    pub pixels: Vec<u8>,
    /// File the image was read from, or `"synthetic"`.
    pub source_path: String,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, size: usize, pixels: Vec<u8>, source_path: impl Into<String>) -> Self {
        assert_eq!(pixels.len(), size * size * 3, "pixel buffer does not match image size");
        ImageRecord { image_id: image_id.into(), size, pixels, source_path: source_path.into() }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.size + x) * 3 + c] as f32 / 255.0
    }

    /// `(size * size) x 3` channels-last tensor with values in `[0, 1]`.
    pub fn to_tensor<F: Scalar>(&self) -> Tensor<F> {
        let inv = 1.0 / 255.0;
        let data = self.pixels.iter().map(|&p| F::lit(p as f64 * inv)).collect();
        Tensor::from_vec(self.size * self.size, 3, data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: String,
    pub image_id: String,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
}

/// Images, their captions, and (for synthetic data) the scene geometry.
///
/// Images are kept sorted by id; captions follow image order, then caption id.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Dataset {
    pub images: Vec<ImageRecord>,
    pub captions: Vec<CaptionRecord>,
    pub split: Split,
    pub image_size: usize,
    pub scenes: BTreeMap<String, SyntheticSceneSpec>,
}

impl Dataset {
    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images
            .binary_search_by(|im| im.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.images[i])
    }

    pub fn image_index(&self, image_id: &str) -> Option<usize> {
        self.images.binary_search_by(|im| im.image_id.as_str().cmp(image_id)).ok()
    }

    pub fn captions_of<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a CaptionRecord> + 'a {
        self.captions.iter().filter(move |c| c.image_id == image_id)
    }

    /// Every caption's image id resolves to an image.
    pub fn check_integrity(&self) -> crate::Result<()> {
        for c in &self.captions {
            crate::error::ensure!(
                self.image(&c.image_id).is_some(),
                "caption {} references unknown image {}",
                c.caption_id,
                c.image_id
            );
        }
        Ok(())
    }

    pub(crate) fn sort(&mut self) {
        self.images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let order: BTreeMap<&str, usize> =
            self.images.iter().enumerate().map(|(i, im)| (im.image_id.as_str(), i)).collect();
        let mut caps = std::mem::take(&mut self.captions);
        caps.sort_by(|a, b| {
            let ia = order.get(a.image_id.as_str()).copied().unwrap_or(usize::MAX);
            let ib = order.get(b.image_id.as_str()).copied().unwrap_or(usize::MAX);
            ia.cmp(&ib).then_with(|| natural_cmp(&a.caption_id, &b.caption_id))
        });
        self.captions = caps;
    }
}

/// Orders `x_c2` before `x_c10`.
fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    let split = |s: &str| {
        let digits = s.len() - s.bytes().rev().take_while(u8::is_ascii_digit).count();
        (s[..digits].to_string(), s[digits..].parse::<u64>().ok())
    };
    let (pa, na) = split(a);
    let (pb, nb) = split(b);
    pa.cmp(&pb).then(na.cmp(&nb)).then_with(|| a.cmp(b))
}
