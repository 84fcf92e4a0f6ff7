use icmlm_tensor::{ConvGeom, Graph, ParamStore, Scalar, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::GridBatch;
use crate::error::{Error, Result};
use crate::nn;
use crate::vision::FeatureGrid;

pub const TP_PREFIX: &str = "tp.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpConfig {
    pub trunk_layers: usize,
    /// Zero means the visual width.
    pub trunk_width: usize,
}

impl Default for TpConfig {
    fn default() -> Self {
        TpConfig { trunk_layers: 2, trunk_width: 0 }
    }
}

impl TpConfig {
    fn width(&self, d_x: usize) -> usize {
        if self.trunk_width == 0 { d_x } else { self.trunk_width }
    }

    pub fn init<F: Scalar>(&self, p: &mut ParamStore<F>, d_x: usize, k: usize, rng: &mut ChaCha8Rng) {
        let width = self.width(d_x);
        let mut cin = d_x;
        for i in 0..self.trunk_layers {
            nn::init_conv(p, &format!("tp.conv{i}"), cin, width, rng);
            cin = width;
        }
        nn::init_linear(p, "tp.out", cin, k, rng);
    }

    /// Number of outputs of an initialized head.
    pub fn k<F: Scalar>(p: &ParamStore<F>) -> usize {
        p.expect("tp.out.w").cols()
    }

    /// `batch x K` logits.
    pub fn forward_graph<F: Scalar>(&self, g: &mut Graph<F>, p: &ParamStore<F>, grid: GridBatch) -> Var {
        let width = self.width(grid.c);
        let mut x = grid.var;
        let mut cin = grid.c;
        for i in 0..self.trunk_layers {
            let geom = ConvGeom { batch: grid.batch, h: grid.h, w: grid.w, cin, cout: width, stride: 1 };
            x = nn::conv_relu(g, p, &format!("tp.conv{i}"), x, geom);
            cin = width;
        }
        let pooled = g.segment_mean(x, grid.cells());
        nn::linear(g, p, "tp.out", pooled)
    }
}

/// Tag logits for one grid; `expected_k` is the size of the active concept set.
pub fn tp_forward(cfg: &TpConfig, p: &ParamStore<f32>, grid: &FeatureGrid, expected_k: usize) -> Result<Vec<f32>> {
    let k = TpConfig::k(p);
    if k != expected_k {
        return Err(Error::Config(format!("tag head predicts {k} concepts but the concept set has {expected_k}")));
    }
    let mut g = Graph::inference();
    let var = g.constant(grid.data.clone());
    let gb = GridBatch { var, batch: 1, h: grid.h, w: grid.w, c: grid.channels };
    let out = cfg.forward_graph(&mut g, p, gb);
    Ok(g.value(out).row(0).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use icmlm_tensor::{softmax, Tensor};
    use rand::SeedableRng;

    #[test]
    fn logits_shape_and_k_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = TpConfig { trunk_layers: 1, trunk_width: 8 };
        let mut p = ParamStore::new();
        cfg.init(&mut p, 16, 4, &mut rng);
        let grid = FeatureGrid { h: 4, w: 4, channels: 16, data: Tensor::randn(16, 16, 1.0, &mut rng), layer_tag: "t".into() };
        let logits = tp_forward(&cfg, &p, &grid, 4).unwrap();
        assert_eq!(logits.len(), 4);
        assert!((softmax(&logits).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!(tp_forward(&cfg, &p, &grid, 5).is_err());
    }
}
