//! Finite-difference check of the full proxy loss, backbone included, in f64.

use icmlm::fusion::{AttFcConfig, GridBatch, TextBatch, TfmConfig, TpConfig, VocabTable};
use icmlm::registry::{HeadSpec, ModelRegistry, ProxyBatch, ProxyModel};
use icmlm::vision::{Backbone, BackboneConfig};
use icmlm_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const D: usize = 8;
pub const T: usize = 4;
pub const K: usize = 3;
pub const VOCAB: usize = 7;
pub const LAMBDA: f64 = 0.7;

pub struct Setup {
    backbone: Backbone,
    model: Box<dyn ProxyModel<f64>>,
    params: ParamStore<f64>,
    images: Tensor<f64>,
    text: TextBatch<f64>,
    targets: Vec<usize>,
    tp_rows: Vec<usize>,
    tp_labels: Tensor<f64>,
}

impl Setup {
    /// Two 4x4 images; one stride-2 conv block gives a 2x2 grid of width 8.
    pub fn new(flavor: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(BackboneConfig { widths: vec![D], strides: vec![2], image_size: 4 }).unwrap();
        let spec = HeadSpec {
            d_x: D,
            d_w: D,
            grid_h: 2,
            grid_w: 2,
            k: K,
            tp: TpConfig { trunk_layers: 1, trunk_width: 5 },
            att: AttFcConfig { heads: 2, d_z: D, fc_hidden: vec![6] },
            tfm: TfmConfig { heads: 2, head_dim: 4, dropout: 0.0, ..Default::default() },
        };
        let vocab = VocabTable::new(Tensor::randn(VOCAB, D, 1.0, &mut rng));
        let model = ModelRegistry::<f64>::standard().build(flavor, spec, Some(vocab)).unwrap();
        let mut params = ParamStore::new();
        backbone.init(&mut params, &mut rng);
        model.init(&mut params, &mut rng);
        // Move the head weights and biases off their symmetric initial values.
        for (name, t) in params.iter_mut() {
            if name == "att.sh" || name == "att.bh" || name.ends_with(".b") || name.ends_with(".gain") || name.ends_with(".bias") {
                t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
            }
        }
        let images = Tensor::from_vec(2 * 16, 3, (0..2 * 16 * 3).map(|_| rng.random::<f64>()).collect());
        let w: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(T, D, 1.0, &mut rng)).collect();
        let text = TextBatch::new(&[(0, &w[0], 1), (1, &w[1], 3), (1, &w[2], 0)]).unwrap();
        let tp_labels = Tensor::from_rows(&[vec![0.5, 0.5, 0.0], vec![0.0, 0.0, 1.0]]);
        Setup { backbone, model, params, images, text, targets: vec![2, 5, 0], tp_rows: vec![0, 1], tp_labels }
    }

    fn loss(&self, g: &mut Graph<f64>, p: &ParamStore<f64>) -> Var {
        let x = g.constant(self.images.clone());
        let gv = *self.backbone.forward_graph(g, p, x, 2).last().unwrap();
        let grid = GridBatch { var: gv.var, batch: 2, h: gv.h, w: gv.w, c: gv.c };
        let batch = ProxyBatch { grid, text: Some(&self.text), targets: &self.targets, tp_rows: &self.tp_rows, tp_labels: Some(&self.tp_labels) };
        self.model.loss(g, p, &batch, LAMBDA, None).unwrap().total
    }
}

/// Relative error `|a - fd| / max(|a|, |fd|)` of each parameter group, over
/// the group's full gradient vector; absolute when both vanish.
pub fn group_errors(s: &Setup, groups: &[(&str, &[&str])]) -> Vec<(String, f64)> {
    let mut g = Graph::new();
    let loss = s.loss(&mut g, &s.params);
    g.backward(loss);
    let grads = g.param_grads();
    let eval = |p: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let l = s.loss(&mut g, p);
        g.value(l).data()[0]
    };
    let eps = 1e-6;
    let mut covered = 0;
    let out = groups
        .iter()
        .map(|(group, prefixes)| {
            let (mut diff, mut na, mut nf) = (0.0f64, 0.0f64, 0.0f64);
            let names: Vec<&String> = s.params.names().filter(|n| prefixes.iter().any(|p| n.starts_with(p))).collect();
            assert!(!names.is_empty(), "group {group} is empty");
            covered += names.len();
            for name in names {
                let analytic = &grads[name.as_str()];
                for i in 0..s.params.expect(name).len() {
                    let mut plus = s.params.clone();
                    plus.get_mut(name).unwrap().data_mut()[i] += eps;
                    let mut minus = s.params.clone();
                    minus.get_mut(name).unwrap().data_mut()[i] -= eps;
                    let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                    let a = analytic.data()[i];
                    diff += (a - fd).powi(2);
                    na += a * a;
                    nf += fd * fd;
                }
            }
            let scale = na.sqrt().max(nf.sqrt());
            // A shared score offset cancels in the softmax over cells, so
            // b_h has a zero gradient; compare it absolutely.
            let err = if scale < 1e-9 { diff.sqrt() } else { diff.sqrt() / scale };
            (group.to_string(), err)
        })
        .collect();
    assert_eq!(covered, s.params.len(), "some parameters belong to no group");
    out
}

/// Parameter groups checked for each flavor.
pub const GROUPS: [(&str, &[(&str, &[&str])]); 3] = [
    (
        "icmlm_attfc",
        &[
            ("backbone", &["backbone."]),
            ("sigma_x", &["att.sx"]),
            ("sigma_w", &["att.sw"]),
            ("sigma_h", &["att.sh"]),
            ("b_h", &["att.bh"]),
            ("fc", &["fc."]),
            ("tp", &["tp."]),
        ],
    ),
    ("icmlm_tfm", &[("backbone", &["backbone."]), ("tfm", &["tfm."]), ("tp", &["tp."])]),
    ("tp_postag", &[("backbone", &["backbone."]), ("tp", &["tp."])]),
];
