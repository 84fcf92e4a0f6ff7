//! Procedural scenes of colored shapes on a 3x3 layout, captioned from a
//! closed grammar so that every token's part of speech is known exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CaptionRecord, Dataset, ImageRecord, Split, DEFAULT_IMAGE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Star,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Cyan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Star];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Star => "star",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple, Color::Cyan];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Cyan => "cyan",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 200, 60],
            Color::Blue => [50, 80, 230],
            Color::Yellow => [230, 220, 40],
            Color::Purple => [150, 50, 200],
            Color::Cyan => [40, 210, 210],
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&c| c == self).unwrap()
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }

    /// Half extent in pixels on a 64-pixel canvas.
    fn radius(self) -> f64 {
        match self {
            Size::Small => 5.0,
            Size::Large => 8.0,
        }
    }
}

/// Region nouns for layout cells `0..9`, row-major from the top left.
pub const REGION_WORDS: [&str; 9] =
    ["northwest", "north", "northeast", "west", "center", "east", "southwest", "south", "southeast"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedShape {
    pub shape: ShapeKind,
    pub color: Color,
    /// Layout cell `0..9`, row-major.
    pub cell: u8,
    pub size: Size,
}

impl PlacedShape {
    /// Pixel center `(x, y)` on a canvas of `image_size` pixels.
    pub fn center(&self, image_size: usize) -> (f64, f64) {
        let unit = image_size as f64 / 4.0;
        let (row, col) = (self.cell / 3, self.cell % 3);
        (unit * (col as f64 + 1.0), unit * (row as f64 + 1.0))
    }

    pub fn radius(&self, image_size: usize) -> f64 {
        self.size.radius() * image_size as f64 / 64.0
    }

    /// Half-open pixel bounding box `(x0, y0, x1, y1)`.
    pub fn pixel_box(&self, image_size: usize) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center(image_size);
        let r = self.radius(image_size);
        (cx - r, cy - r, cx + r, cy + r)
    }

    /// Feature-grid cells `(row, col)` overlapped by the bounding box on a
    /// `grid x grid` map over an `image_size` canvas.
    pub fn bounding_cells(&self, image_size: usize, grid: usize) -> Vec<(usize, usize)> {
        let cell = image_size as f64 / grid as f64;
        let (x0, y0, x1, y1) = self.pixel_box(image_size);
        let lo = |v: f64| ((v / cell).floor().max(0.0) as usize).min(grid - 1);
        // The box is half-open, so the last covered pixel is x1 - 1.
        let hi = |v: f64| (((v - 1.0) / cell).floor().max(0.0) as usize).min(grid - 1);
        let mut out = Vec::new();
        for r in lo(y0)..=hi(y1) {
            for c in lo(x0)..=hi(x1) {
                out.push((r, c));
            }
        }
        out
    }

    fn contains(&self, px: f64, py: f64, image_size: usize) -> bool {
        let (cx, cy) = self.center(image_size);
        let r = self.radius(image_size);
        let (dx, dy) = (px - cx, py - cy);
        match self.shape {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
            ShapeKind::Triangle => dy >= -r && dy <= 0.8 * r && dx.abs() <= 0.55 * (dy + r),
            ShapeKind::Star => in_star(dx, dy, r),
        }
    }

    /// "a small red circle in the center"
    pub fn caption(&self) -> String {
        format!(
            "a {} {} {} in the {}",
            self.size.word(),
            self.color.word(),
            self.shape.word(),
            REGION_WORDS[self.cell as usize]
        )
    }
}

fn in_star(dx: f64, dy: f64, r: f64) -> bool {
    let verts: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let ang = -std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::PI / 5.0;
            let rad = if i % 2 == 0 { r } else { 0.45 * r };
            (rad * ang.cos(), rad * ang.sin())
        })
        .collect();
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > dy) != (yj > dy) && dx < (xj - xi) * (dy - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Layout of one synthetic scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub shapes: Vec<PlacedShape>,
    pub seed: u64,
}

impl SyntheticSceneSpec {
    /// "there is a small red circle and a large blue square"
    pub fn scene_caption(&self) -> String {
        let parts: Vec<String> = self
            .shapes
            .iter()
            .map(|s| format!("a {} {} {}", s.size.word(), s.color.word(), s.shape.word()))
            .collect();
        format!("there is {}", parts.join(" and "))
    }

    pub fn render(&self, image_size: usize) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut px = vec![0u8; image_size * image_size * 3];
        for v in px.iter_mut() {
            *v = rng.random_range(0..=20);
        }
        for s in &self.shapes {
            let rgb = s.color.rgb();
            for y in 0..image_size {
                for x in 0..image_size {
                    if s.contains(x as f64 + 0.5, y as f64 + 0.5, image_size) {
                        let o = (y * image_size + x) * 3;
                        px[o..o + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        px
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthOptions {
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub image_size: usize,
    pub split: Split,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions { min_shapes: 1, max_shapes: 3, image_size: DEFAULT_IMAGE_SIZE, split: Split::Train }
    }
}

/// Seed of the `index`-th scene; scenes are independent of each other.
fn scene_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_scene(seed: u64, index: usize, opts: &SynthOptions) -> SyntheticSceneSpec {
    assert!(1 <= opts.min_shapes && opts.min_shapes <= opts.max_shapes && opts.max_shapes <= 9);
    let s = scene_seed(seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(s);
    let n = rng.random_range(opts.min_shapes..=opts.max_shapes);
    let mut cells: Vec<u8> = (0..9).collect();
    let mut shapes = Vec::with_capacity(n);
    for k in 0..n {
        let j = rng.random_range(k..9);
        cells.swap(k, j);
        shapes.push(PlacedShape {
            shape: ShapeKind::ALL[rng.random_range(0..4)],
            color: Color::ALL[rng.random_range(0..6)],
            cell: cells[k],
            size: Size::ALL[rng.random_range(0..2)],
        });
    }
    SyntheticSceneSpec { shapes, seed: s }
}

/// `n_images` scenes with 1–3 shapes, one caption per shape plus one
/// scene-level caption.
pub fn generate_synthetic(n_images: usize, seed: u64) -> Dataset {
    generate_synthetic_with(n_images, seed, &SynthOptions::default())
}

pub fn generate_synthetic_with(n_images: usize, seed: u64, opts: &SynthOptions) -> Dataset {
    assert!(n_images >= 1, "n_images must be positive");
    let mut images = Vec::with_capacity(n_images);
    let mut captions = Vec::new();
    let mut scenes = BTreeMap::new();
    let split_tag = match opts.split {
        Split::Train => "t",
        Split::Val => "v",
    };
    for i in 0..n_images {
        let spec = sample_scene(seed, i, opts);
        let image_id = format!("syn{seed}{split_tag}_{i:06}");
        images.push(ImageRecord::new(&image_id, opts.image_size, spec.render(opts.image_size), "synthetic"));
        let mut texts: Vec<String> = spec.shapes.iter().map(PlacedShape::caption).collect();
        texts.push(spec.scene_caption());
        for (j, text) in texts.into_iter().enumerate() {
            captions.push(CaptionRecord { caption_id: format!("{image_id}_c{j}"), image_id: image_id.clone(), text });
        }
        scenes.insert(image_id, spec);
    }
    let mut ds = Dataset { images, captions, split: opts.split, image_size: opts.image_size, scenes };
    ds.sort();
    ds
}
