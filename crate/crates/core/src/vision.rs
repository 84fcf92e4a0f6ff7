//! The trainable convolutional backbone and feature pooling.

use icmlm_tensor::{ConvGeom, Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ImageRecord;
use crate::error::{ensure, Result};
use crate::nn;

pub const BACKBONE_PREFIX: &str = "backbone.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub image_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { widths: vec![32, 64, 128, 128], strides: vec![2, 2, 1, 2], image_size: 64 }
    }
}

impl BackboneConfig {
    pub fn d_x(&self) -> usize {
        *self.widths.last().unwrap()
    }

    /// Edge length of each block's output grid.
    pub fn grid_sizes(&self) -> Vec<usize> {
        let mut s = self.image_size;
        self.strides.iter().map(|&st| {
            s = s.div_ceil(st);
            s
        }).collect()
    }

    pub fn grid(&self) -> usize {
        *self.grid_sizes().last().unwrap()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.widths.is_empty(), "backbone needs at least one block");
        ensure!(self.widths.len() == self.strides.len(), "backbone widths and strides differ in length");
        ensure!(self.strides.iter().all(|&s| s == 1 || s == 2), "backbone strides must be 1 or 2");
        ensure!(self.image_size > 0, "image size must be positive");
        Ok(())
    }
}

/// Block output as a graph node: `(batch * h * w) x c` rows, channels last.
#[derive(Clone, Copy, Debug)]
pub struct GridVar {
    pub var: Var,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    /// `(h * w) x channels`, row-major over cells.
    pub data: Tensor<f32>,
    pub layer_tag: String,
}

pub fn block_tag(i: usize) -> String {
    format!("block{}", i + 1)
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: BackboneConfig,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Backbone { cfg })
    }

    pub fn init<F: Scalar>(&self, p: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let mut cin = 3;
        for (i, &cout) in self.cfg.widths.iter().enumerate() {
            nn::init_conv(p, &format!("{BACKBONE_PREFIX}conv{i}"), cin, cout, rng);
            cin = cout;
        }
    }

    /// Every block's output for a batch of `batch` images stacked as
    /// `(batch * size * size) x 3`.
    pub fn forward_graph<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamStore<F>, images: Var, batch: usize) -> Vec<GridVar> {
        let mut x = images;
        let (mut h, mut w, mut cin) = (self.cfg.image_size, self.cfg.image_size, 3);
        let mut out = Vec::with_capacity(self.cfg.widths.len());
        for (i, (&cout, &stride)) in self.cfg.widths.iter().zip(&self.cfg.strides).enumerate() {
            let geom = ConvGeom { batch, h, w, cin, cout, stride };
            x = nn::conv_relu(g, p, &format!("{BACKBONE_PREFIX}conv{i}"), x, geom);
            h = geom.out_h();
            w = geom.out_w();
            cin = cout;
            out.push(GridVar { var: x, h, w, c: cout });
        }
        out
    }

    pub fn stack_images<F: Scalar>(&self, images: &[&ImageRecord]) -> Result<Tensor<F>> {
        let s = self.cfg.image_size;
        for im in images {
            ensure!(im.size == s, "image {} is {}x{}, backbone expects {s}x{s}", im.image_id, im.size, im.size);
        }
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for im in images {
            data.extend(im.pixels.iter().map(|&v| F::lit(v as f64 / 255.0)));
        }
        Ok(Tensor::from_vec(images.len() * s * s, 3, data))
    }

    /// Inference forward; returns the last three blocks' grids for each image.
    pub fn forward(&self, p: &ParamStore<f32>, images: &[&ImageRecord]) -> Result<Vec<Vec<FeatureGrid>>> {
        let x = self.stack_images::<f32>(images)?;
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let grids = self.forward_graph(&mut g, p, xv, images.len());
        let first = grids.len().saturating_sub(3);
        let mut out = vec![Vec::new(); images.len()];
        for (bi, gv) in grids.iter().enumerate().skip(first) {
            let cells = gv.h * gv.w;
            let all = g.value(gv.var);
            for (n, dst) in out.iter_mut().enumerate() {
                dst.push(FeatureGrid {
                    h: gv.h,
                    w: gv.w,
                    channels: gv.c,
                    data: all.slice_rows(n * cells, cells),
                    layer_tag: block_tag(bi),
                });
            }
        }
        Ok(out)
    }

    pub fn forward_one(&self, p: &ParamStore<f32>, image: &ImageRecord) -> Result<Vec<FeatureGrid>> {
        Ok(self.forward(p, &[image])?.pop().unwrap())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    GlobalAverage,
    /// Average over each quadrant, concatenated row-major: `4 * channels`.
    Spatial2x2,
}

pub fn pool(grid: &FeatureGrid, mode: PoolMode, l2: bool) -> Vec<f32> {
    let c = grid.channels;
    let mut v: Vec<f32> = match mode {
        PoolMode::GlobalAverage => {
            let mut acc = vec![0.0f64; c];
            for r in 0..grid.h * grid.w {
                for (a, &x) in acc.iter_mut().zip(grid.data.row(r)) {
                    *a += x as f64;
                }
            }
            let n = (grid.h * grid.w) as f64;
            acc.iter().map(|a| (a / n) as f32).collect()
        }
        PoolMode::Spatial2x2 => {
            let mut acc = vec![0.0f64; 4 * c];
            let mut counts = [0usize; 4];
            for y in 0..grid.h {
                for x in 0..grid.w {
                    let q = (2 * y / grid.h) * 2 + 2 * x / grid.w;
                    counts[q] += 1;
                    for (a, &v) in acc[q * c..(q + 1) * c].iter_mut().zip(grid.data.row(y * grid.w + x)) {
                        *a += v as f64;
                    }
                }
            }
            acc.chunks(c).zip(counts).flat_map(|(ch, n)| ch.iter().map(move |a| (a / n.max(1) as f64) as f32)).collect()
        }
    };
    if l2 {
        let norm = v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x = (*x as f64 / norm) as f32);
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup() -> (Backbone, ParamStore<f32>) {
        let bb = Backbone::new(BackboneConfig::default()).unwrap();
        let mut p = ParamStore::new();
        bb.init(&mut p, &mut ChaCha8Rng::seed_from_u64(0));
        (bb, p)
    }

    #[test]
    fn stride_arithmetic() {
        let (bb, p) = setup();
        assert_eq!(bb.cfg.grid_sizes(), [32, 16, 16, 8]);
        let img = ImageRecord::new("x", 64, vec![0; 64 * 64 * 3], "synthetic");
        let grids = bb.forward_one(&p, &img).unwrap();
        let shapes: Vec<_> = grids.iter().map(|g| (g.h, g.w, g.channels, g.layer_tag.as_str())).collect();
        assert_eq!(shapes, [(16, 16, 64, "block2"), (16, 16, 128, "block3"), (8, 8, 128, "block4")]);
        assert!(grids.iter().all(|g| g.data.all_finite()));
        let small = BackboneConfig { image_size: 32, ..Default::default() };
        assert_eq!(small.grid_sizes(), [16, 8, 8, 4]);
    }

    #[test]
    fn inference_is_bit_identical_and_batch_independent() {
        let (bb, p) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |id: &str, rng: &mut ChaCha8Rng| {
            ImageRecord::new(id, 64, (0..64 * 64 * 3).map(|_| rand::Rng::random::<u8>(rng)).collect(), "synthetic")
        };
        let a = mk("a", &mut rng);
        let b = mk("b", &mut rng);
        let one = bb.forward_one(&p, &a).unwrap();
        assert_eq!(one, bb.forward_one(&p, &a).unwrap());
        let both = bb.forward(&p, &[&b, &a]).unwrap();
        for (x, y) in one.iter().zip(&both[1]) {
            for (u, v) in x.data.data().iter().zip(y.data.data()) {
                assert!((u - v).abs() <= 1e-5 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn wrong_size_is_rejected() {
        let (bb, p) = setup();
        let img = ImageRecord::new("x", 32, vec![0; 32 * 32 * 3], "synthetic");
        assert!(bb.forward_one(&p, &img).is_err());
    }

    #[test]
    fn pooling() {
        let grid = FeatureGrid { h: 8, w: 8, channels: 128, data: Tensor::filled(64, 128, 0.25), layer_tag: "t".into() };
        assert!(pool(&grid, PoolMode::GlobalAverage, false).iter().all(|&v| v == 0.25));
        let s = pool(&grid, PoolMode::Spatial2x2, false);
        assert_eq!(s.len(), 512);
        let n: f64 = pool(&grid, PoolMode::Spatial2x2, true).iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((n.sqrt() - 1.0).abs() < 1e-6);

        let mut data = Tensor::zeros(4, 1);
        data.data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let g = FeatureGrid { h: 2, w: 2, channels: 1, data, layer_tag: "t".into() };
        assert_eq!(pool(&g, PoolMode::Spatial2x2, false), [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pool(&g, PoolMode::GlobalAverage, false), [2.5]);
    }
}
