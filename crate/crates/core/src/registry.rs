//! Proxy-task models behind one trait, looked up by flavor name.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use icmlm_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fusion::{AttFcConfig, GridBatch, HeadOutput, TextBatch, TfmConfig, TpConfig, VocabTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    TpPostag,
    TpCluster,
    IcmlmTfm,
    IcmlmAttfc,
}

impl Flavor {
    pub const ALL: [Flavor; 4] = [Flavor::TpPostag, Flavor::TpCluster, Flavor::IcmlmTfm, Flavor::IcmlmAttfc];

    pub fn name(self) -> &'static str {
        match self {
            Flavor::TpPostag => "tp_postag",
            Flavor::TpCluster => "tp_cluster",
            Flavor::IcmlmTfm => "icmlm_tfm",
            Flavor::IcmlmAttfc => "icmlm_attfc",
        }
    }

    pub fn is_icmlm(self) -> bool {
        matches!(self, Flavor::IcmlmTfm | Flavor::IcmlmAttfc)
    }
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Flavor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Flavor::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model flavor `{s}`")))
    }
}

/// Sizes and head settings shared by every flavor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub d_x: usize,
    pub d_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Tag classes; zero disables the tag head.
    pub k: usize,
    pub tp: TpConfig,
    pub att: AttFcConfig,
    pub tfm: TfmConfig,
}

/// Inputs of one optimization step after the backbone.
pub struct ProxyBatch<'a, F> {
    pub grid: GridBatch,
    pub text: Option<&'a TextBatch<F>>,
    pub targets: &'a [usize],
    /// Batch image indices that carry a tag label, and their label rows.
    pub tp_rows: &'a [usize],
    pub tp_labels: Option<&'a Tensor<F>>,
}

pub struct LossVars {
    pub mlm: Option<Var>,
    pub tp: Option<Var>,
    pub total: Var,
}

pub trait ProxyModel<F: Scalar>: Send + Sync {
    fn flavor(&self) -> Flavor;

    fn spec(&self) -> &HeadSpec;

    fn init(&self, p: &mut ParamStore<F>, rng: &mut ChaCha8Rng);

    /// Vocabulary logits and attention for masked captions; tag-prediction
    /// flavors have no such output.
    fn predict(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        grid: GridBatch,
        text: &TextBatch<F>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadOutput>;

    /// `l_mlm + lambda * l_tp` for fusion flavors, `l_tp` for tag flavors.
    /// With `lambda == 0` the tag head is not evaluated.
    fn loss(&self, g: &mut Graph<F>, p: &ParamStore<F>, batch: &ProxyBatch<F>, lambda: F, rng: Option<&mut ChaCha8Rng>) -> Result<LossVars>;
}

fn tp_term<F: Scalar>(spec: &HeadSpec, g: &mut Graph<F>, p: &ParamStore<F>, batch: &ProxyBatch<F>) -> Result<Option<Var>> {
    let Some(labels) = batch.tp_labels else { return Ok(None) };
    if batch.tp_rows.is_empty() {
        return Ok(None);
    }
    ensure!(spec.k > 0, "tag labels supplied but the model has no tag head");
    ensure!(labels.shape() == (batch.tp_rows.len(), spec.k), "tag labels have shape {:?}", labels.shape());
    let logits = spec.tp.forward_graph(g, p, batch.grid);
    let logits = if batch.tp_rows.len() == batch.grid.batch && batch.tp_rows.iter().enumerate().all(|(i, &r)| i == r) {
        logits
    } else {
        g.gather_rows(logits, batch.tp_rows)
    };
    Ok(Some(g.soft_cross_entropy(logits, labels.clone())))
}

fn mlm_term<F: Scalar>(g: &mut Graph<F>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (n, v) = g.value(logits).shape();
    ensure!(n == targets.len(), "{n} predictions for {} targets", targets.len());
    let mut onehot = Tensor::zeros(n, v);
    for (r, &t) in targets.iter().enumerate() {
        ensure!(t < v, "target id {t} out of range for a vocabulary of {v}");
        onehot.set(r, t, F::one());
    }
    Ok(g.soft_cross_entropy(logits, onehot))
}

struct TagModel {
    flavor: Flavor,
    spec: HeadSpec,
}

impl<F: Scalar> ProxyModel<F> for TagModel {
    fn flavor(&self) -> Flavor {
        self.flavor
    }

    fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    fn init(&self, p: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        self.spec.tp.init(p, self.spec.d_x, self.spec.k, rng);
    }

    fn predict(&self, _: &mut Graph<F>, _: &ParamStore<F>, _: GridBatch, _: &TextBatch<F>, _: Option<&mut ChaCha8Rng>) -> Result<HeadOutput> {
        Err(Error::Config(format!("{} does not predict masked tokens", self.flavor)))
    }

    fn loss(&self, g: &mut Graph<F>, p: &ParamStore<F>, batch: &ProxyBatch<F>, _: F, _: Option<&mut ChaCha8Rng>) -> Result<LossVars> {
        let tp = tp_term(&self.spec, g, p, batch)?.ok_or_else(|| Error::Contract("tag batch without labels".into()))?;
        Ok(LossVars { mlm: None, tp: Some(tp), total: tp })
    }
}

struct FusionModel<F> {
    flavor: Flavor,
    spec: HeadSpec,
    vocab: VocabTable<F>,
}

impl<F: Scalar> ProxyModel<F> for FusionModel<F> {
    fn flavor(&self) -> Flavor {
        self.flavor
    }

    fn spec(&self) -> &HeadSpec {
        &self.spec
    }

    fn init(&self, p: &mut ParamStore<F>, rng: &mut ChaCha8Rng) {
        let s = &self.spec;
        match self.flavor {
            Flavor::IcmlmAttfc => s.att.init(p, s.d_x, s.d_w, rng),
            _ => s.tfm.init(p, s.d_x, s.d_w, s.grid_h * s.grid_w, rng),
        }
        if s.k > 0 {
            s.tp.init(p, s.d_x, s.k, rng);
        }
    }

    fn predict(
        &self,
        g: &mut Graph<F>,
        p: &ParamStore<F>,
        grid: GridBatch,
        text: &TextBatch<F>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<HeadOutput> {
        ensure!(grid.c == self.spec.d_x, "grid has {} channels, expected {}", grid.c, self.spec.d_x);
        ensure!(text.w.cols() == self.spec.d_w, "text width {} does not match d_w {}", text.w.cols(), self.spec.d_w);
        ensure!(text.image.iter().all(|&i| i < grid.batch), "text item refers to a missing image");
        Ok(match self.flavor {
            Flavor::IcmlmAttfc => self.spec.att.forward_graph(g, p, &self.vocab, grid, text),
            _ => self.spec.tfm.forward_graph(g, p, &self.vocab, grid, text, rng),
        })
    }

    fn loss(&self, g: &mut Graph<F>, p: &ParamStore<F>, batch: &ProxyBatch<F>, lambda: F, rng: Option<&mut ChaCha8Rng>) -> Result<LossVars> {
        let text = batch.text.ok_or_else(|| Error::Contract("fusion batch without captions".into()))?;
        let out = self.predict(g, p, batch.grid, text, rng)?;
        let mlm = mlm_term(g, out.logits, batch.targets)?;
        let tp = if lambda > F::zero() { tp_term(&self.spec, g, p, batch)? } else { None };
        let total = match tp {
            Some(t) => {
                let scaled = g.scale(t, lambda);
                g.add(mlm, scaled)
            }
            None => mlm,
        };
        Ok(LossVars { mlm: Some(mlm), tp, total })
    }
}

type Builder<F> = fn(Flavor, HeadSpec, Option<VocabTable<F>>) -> Result<Box<dyn ProxyModel<F>>>;

fn build_tag<F: Scalar>(flavor: Flavor, spec: HeadSpec, _: Option<VocabTable<F>>) -> Result<Box<dyn ProxyModel<F>>> {
    ensure!(spec.k > 0, "{flavor} needs at least one tag class");
    Ok(Box::new(TagModel { flavor, spec }))
}

fn build_fusion<F: Scalar>(flavor: Flavor, spec: HeadSpec, vocab: Option<VocabTable<F>>) -> Result<Box<dyn ProxyModel<F>>> {
    let vocab = vocab.ok_or_else(|| Error::Config(format!("{flavor} needs the language model's vocabulary table")))?;
    ensure!(vocab.width() == spec.d_w, "vocabulary width {} does not match d_w {}", vocab.width(), spec.d_w);
    Ok(Box::new(FusionModel { flavor, spec, vocab }))
}

/// Flavor name to constructor.
pub struct ModelRegistry<F: Scalar> {
    builders: BTreeMap<&'static str, (Flavor, Builder<F>)>,
}

impl<F: Scalar> ModelRegistry<F> {
    pub fn empty() -> Self {
        ModelRegistry { builders: BTreeMap::new() }
    }

    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Flavor::TpPostag, build_tag::<F>);
        r.register(Flavor::TpCluster, build_tag::<F>);
        r.register(Flavor::IcmlmTfm, build_fusion::<F>);
        r.register(Flavor::IcmlmAttfc, build_fusion::<F>);
        r
    }

    pub fn register(&mut self, flavor: Flavor, builder: Builder<F>) {
        self.builders.insert(flavor.name(), (flavor, builder));
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.builders.keys().copied().collect()
    }

    pub fn build(&self, name: &str, spec: HeadSpec, vocab: Option<VocabTable<F>>) -> Result<Box<dyn ProxyModel<F>>> {
        let (flavor, b) = self
            .builders
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown model flavor `{name}` (available: {})", self.names().join(", "))))?;
        b(*flavor, spec, vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(k: usize) -> HeadSpec {
        HeadSpec {
            d_x: 4,
            d_w: 4,
            grid_h: 2,
            grid_w: 2,
            k,
            tp: TpConfig { trunk_layers: 1, trunk_width: 4 },
            att: AttFcConfig { heads: 2, d_z: 2, fc_hidden: vec![4] },
            tfm: TfmConfig { heads: 2, head_dim: 2, ..Default::default() },
        }
    }

    #[test]
    fn registry_resolves_every_flavor() {
        let r = ModelRegistry::<f64>::standard();
        assert_eq!(r.names(), ["icmlm_attfc", "icmlm_tfm", "tp_cluster", "tp_postag"]);
        let vocab = VocabTable::new(Tensor::zeros(6, 4));
        for f in Flavor::ALL {
            let m = r.build(f.name(), spec(3), Some(vocab.clone())).unwrap();
            assert_eq!(m.flavor(), f);
            assert_eq!(f.name().parse::<Flavor>().unwrap(), f);
        }
        assert!(r.build("icmlm_attfc", spec(3), None).is_err());
        assert!(r.build("tp_postag", spec(0), None).is_err());
        assert!(r.build("nope", spec(3), None).is_err());
    }
}
