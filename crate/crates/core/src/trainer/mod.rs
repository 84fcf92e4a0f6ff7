//! Proxy-task optimization: batching, warm-up, checkpoints and resumption.

mod checkpoint;
mod config;
mod infer;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use icmlm_tensor::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::caption::{LabelSet, MaskTriplet, TokenSequence};
use crate::corpus::Dataset;
use crate::error::{ensure, Error, Result};
use crate::fusion::{GridBatch, TextBatch, VocabTable};
use crate::objectives::LossReport;
use crate::optim::{optimizer_by_name, Optimizer};
use crate::registry::{Flavor, ModelRegistry, ProxyBatch, ProxyModel};
use crate::text::TextEncoder;
use crate::vision::{Backbone, BACKBONE_PREFIX};

pub use checkpoint::{load_lm, read_weights, save_lm, write_weights, Checkpoint, ModelDims, LOG_FILE, META_FILE, WEIGHTS_FILE};
pub use config::TrainConfig;
pub use infer::{MaskQuery, Prediction, TrainedModel};

/// Training inputs. Tag flavors read `labels`; fusion flavors read the
/// triplets, their token sequences and the frozen language model, plus
/// `labels` when `lambda > 0`.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub sequences: &'a [TokenSequence],
    pub triplets: &'a [MaskTriplet],
    pub labels: Option<&'a LabelSet>,
    pub lm: Option<&'a TextEncoder>,
}

/// One image with everything it contributes to a step.
struct Unit {
    image: usize,
    /// `(sequence, mask index, target id)`
    items: Vec<(usize, usize, usize)>,
    label: Option<usize>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derived_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(seed ^ stream.rotate_left(32)) ^ index))
}

const EPOCH_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

pub(crate) fn dims_of(flavor: Flavor, data: &TrainData) -> Result<ModelDims> {
    let k = data.labels.map_or(0, |l| l.k);
    if flavor.is_icmlm() {
        let lm = data.lm.ok_or_else(|| Error::Config(format!("{flavor} needs a pretrained language model")))?;
        Ok(ModelDims { k, vocab_size: lm.vocab().len(), d_w: lm.d_w() })
    } else {
        ensure!(data.labels.is_some(), "{flavor} needs tag labels");
        Ok(ModelDims { k, vocab_size: 0, d_w: 0 })
    }
}

fn plan(cfg: &TrainConfig, data: &TrainData) -> Result<Vec<Unit>> {
    let ds = data.dataset;
    let mut units: BTreeMap<usize, Unit> = BTreeMap::new();
    let image_of = |id: &str| ds.image_index(id).ok_or_else(|| Error::Contract(format!("unknown image `{id}`")));
    if cfg.flavor.is_icmlm() {
        let lm = data.lm.expect("checked by dims_of");
        let seq_of: HashMap<&str, usize> = data.sequences.iter().enumerate().map(|(i, s)| (s.caption_id.as_str(), i)).collect();
        for t in data.triplets {
            let image = image_of(&t.image_id)?;
            let si = *seq_of.get(t.caption_id.as_str()).ok_or_else(|| Error::Contract(format!("triplet refers to unknown caption `{}`", t.caption_id)))?;
            let seq = &data.sequences[si];
            ensure!(seq.image_id == t.image_id, "caption {} does not belong to image {}", t.caption_id, t.image_id);
            ensure!(t.mask_index < seq.len(), "mask_index {} out of range for caption {}", t.mask_index, t.caption_id);
            ensure!(
                lm.vocab().id(&seq.tokens[t.mask_index]) == Some(t.target_vocab_id),
                "triplet target {} of caption {} does not match the language model's vocabulary",
                t.target_vocab_id,
                t.caption_id
            );
            units.entry(image).or_insert_with(|| Unit { image, items: Vec::new(), label: None }).items.push((si, t.mask_index, t.target_vocab_id));
        }
    }
    if let Some(labels) = data.labels {
        for (li, v) in labels.vectors.iter().enumerate() {
            let image = image_of(&v.image_id)?;
            match units.get_mut(&image) {
                Some(u) => u.label = Some(li),
                None if !cfg.flavor.is_icmlm() => {
                    units.insert(image, Unit { image, items: Vec::new(), label: Some(li) });
                }
                None => {}
            }
        }
    }
    ensure!(!units.is_empty(), "no training examples for {}", cfg.flavor);
    Ok(units.into_values().collect())
}

/// Owns the mutable state of one training run.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: TrainData<'a>,
    dims: ModelDims,
    backbone: Backbone,
    model: Box<dyn ProxyModel<f32>>,
    params: ParamStore<f32>,
    opt: Box<dyn Optimizer>,
    step: u64,
    log: Vec<LossReport>,
    units: Vec<Unit>,
    perm: (u64, Vec<usize>),
    text_cache: HashMap<(usize, usize), Tensor<f32>>,
}

impl<'a> Trainer<'a> {
    /// A freshly initialized run.
    pub fn new(cfg: TrainConfig, data: TrainData<'a>) -> Result<Self> {
        cfg.validate()?;
        let dims = dims_of(cfg.flavor, &data)?;
        let backbone = Backbone::new(cfg.backbone())?;
        let model = build_model(&cfg, dims, data.lm)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = ParamStore::new();
        backbone.init(&mut params, &mut rng);
        model.init(&mut params, &mut rng);
        let opt = optimizer_by_name(&cfg.optimizer, cfg.optim())?;
        let units = plan(&cfg, &data)?;
        Ok(Trainer { cfg, data, dims, backbone, model, params, opt, step: 0, log: Vec::new(), units, perm: (u64::MAX, Vec::new()), text_cache: HashMap::new() })
    }

    /// Continues from a checkpoint. `cfg` may change bookkeeping fields
    /// (steps, logging, checkpoint cadence) but nothing that shapes the model.
    pub fn from_checkpoint(ckpt: Checkpoint, cfg: Option<TrainConfig>, data: TrainData<'a>) -> Result<Self> {
        let saved = &ckpt.config;
        let cfg = cfg.unwrap_or_else(|| saved.clone());
        if cfg.flavor != saved.flavor {
            return Err(Error::Refused(format!("checkpoint flavor is {}, config asks for {}", saved.flavor, cfg.flavor)));
        }
        let dims = dims_of(cfg.flavor, &data)?;
        if dims.k != ckpt.dims.k {
            return Err(Error::Refused(format!("checkpoint has K = {}, data has K = {}", ckpt.dims.k, dims.k)));
        }
        if dims.vocab_size != ckpt.dims.vocab_size || dims.d_w != ckpt.dims.d_w {
            return Err(Error::Refused(format!(
                "checkpoint vocabulary is {} x {}, language model is {} x {}",
                ckpt.dims.vocab_size, ckpt.dims.d_w, dims.vocab_size, dims.d_w
            )));
        }
        if let (Some(a), Some(b)) = (&ckpt.lm, data.lm) {
            if a.checksum() != b.checksum() {
                return Err(Error::Refused("language model differs from the one the checkpoint was trained with".into()));
            }
        }
        let shape = |c: &TrainConfig| (c.backbone(), c.head_spec(dims.d_w, dims.k), c.optimizer.clone(), c.seed);
        if shape(&cfg) != shape(saved) {
            return Err(Error::Refused("architecture, optimizer or seed differ from the checkpoint".into()));
        }
        let mut t = Trainer::new(cfg, data)?;
        for (name, tensor) in t.params.iter() {
            let saved = ckpt.params.get(name).ok_or_else(|| Error::Refused(format!("checkpoint lacks parameter `{name}`")))?;
            if saved.shape() != tensor.shape() {
                return Err(Error::Refused(format!("parameter `{name}` has shape {:?} in the checkpoint", saved.shape())));
            }
        }
        t.params = ckpt.params;
        t.opt.load_state(ckpt.optim_state);
        t.step = ckpt.step;
        t.log = ckpt.log;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn log(&self) -> &[LossReport] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            dims: self.dims,
            step: self.step,
            params: self.params.clone(),
            optim_state: self.opt.state().clone(),
            lm: self.data.lm.cloned(),
            log: self.log.clone(),
        }
    }

    /// Runs `n` optimizer steps, saving to `dir` every `checkpoint_every`
    /// steps when a directory is given.
    pub fn run(&mut self, n: u64, dir: Option<&Path>) -> Result<()> {
        let end = self.step + n;
        while self.step < end {
            let report = self.train_step()?;
            let s = report.step;
            if self.cfg.log_every > 0 && (s % self.cfg.log_every == 0 || s + 1 == end) {
                tracing::info!(
                    step = s,
                    l_total = report.l_total,
                    l_mlm = ?report.l_mlm,
                    l_tp = ?report.l_tp,
                    lr = report.learning_rate,
                    "train"
                );
                self.log.push(report);
            }
            if let Some(dir) = dir {
                if self.cfg.checkpoint_every > 0 && self.step % self.cfg.checkpoint_every == 0 {
                    self.checkpoint().save(dir)?;
                }
            }
        }
        Ok(())
    }

    fn frozen_backbone(&self, step: u64) -> bool {
        let applies = match self.cfg.flavor {
            Flavor::IcmlmAttfc => true,
            Flavor::IcmlmTfm => self.cfg.warmup_tfm,
            _ => false,
        };
        applies && step < self.cfg.warmup_steps
    }

    fn batch_units(&mut self, step: u64) -> Vec<usize> {
        let n = self.units.len();
        let b = self.cfg.batch_size.min(n);
        (0..b)
            .map(|i| {
                let pos = step as usize * b + i;
                let epoch = (pos / n) as u64;
                if self.perm.0 != epoch {
                    let mut p: Vec<usize> = (0..n).collect();
                    p.shuffle(&mut derived_rng(self.cfg.seed, EPOCH_STREAM, epoch));
                    self.perm = (epoch, p);
                }
                self.perm.1[pos % n]
            })
            .collect()
    }

    fn text_features(&mut self, seq: usize, mask: usize) -> Result<()> {
        if !self.text_cache.contains_key(&(seq, mask)) {
            let lm = self.data.lm.expect("fusion flavors carry a language model");
            let f = lm.encode(&self.data.sequences[seq].tokens, Some(mask))?;
            self.text_cache.insert((seq, mask), f.w);
        }
        Ok(())
    }

    fn train_step(&mut self) -> Result<LossReport> {
        let s = self.step;
        let chosen = self.batch_units(s);
        let mut rng = derived_rng(self.cfg.seed, STEP_STREAM, s);
        let ds = self.data.dataset;
        let images: Vec<_> = chosen.iter().map(|&u| &ds.images[self.units[u].image]).collect();
        let batch_ids: Vec<String> = images.iter().map(|im| im.image_id.clone()).collect();
        let mut x = self.backbone.stack_images::<f32>(&images)?;
        if self.cfg.augment {
            let per = x.rows() / images.len();
            for b in 0..images.len() {
                let gain: f32 = rng.random_range(0.8..1.2);
                for v in &mut x.data_mut()[b * per * 3..(b + 1) * per * 3] {
                    *v = (*v * gain).min(1.0);
                }
            }
        }

        let mut items = Vec::new();
        let mut targets = Vec::new();
        if self.cfg.flavor.is_icmlm() {
            for (bi, &u) in chosen.iter().enumerate() {
                let all = &self.units[u].items;
                let picked: Vec<usize> = if self.cfg.triplets_per_image > 0 && all.len() > self.cfg.triplets_per_image {
                    let mut v = rand::seq::index::sample(&mut rng, all.len(), self.cfg.triplets_per_image).into_vec();
                    v.sort_unstable();
                    v
                } else {
                    (0..all.len()).collect()
                };
                for i in picked {
                    let (seq, mask, target) = self.units[u].items[i];
                    items.push((bi, seq, mask));
                    targets.push(target);
                }
            }
            for &(_, seq, mask) in &items {
                self.text_features(seq, mask)?;
            }
        }
        let text = if items.is_empty() {
            None
        } else {
            let refs: Vec<_> = items.iter().map(|&(bi, seq, mask)| (bi, &self.text_cache[&(seq, mask)], mask)).collect();
            Some(TextBatch::new(&refs)?)
        };

        let mut tp_rows = Vec::new();
        let mut label_rows = Vec::new();
        if let Some(labels) = self.data.labels {
            if self.dims.k > 0 && (!self.cfg.flavor.is_icmlm() || self.cfg.lambda > 0.0) {
                for (bi, &u) in chosen.iter().enumerate() {
                    if let Some(li) = self.units[u].label {
                        tp_rows.push(bi);
                        label_rows.push(labels.vectors[li].y.iter().map(|&v| v as f32).collect::<Vec<_>>());
                    }
                }
            }
        }
        let tp_labels = (!tp_rows.is_empty()).then(|| Tensor::from_rows(&label_rows));

        let mut g = Graph::new();
        if self.frozen_backbone(s) {
            g.freeze_prefix(BACKBONE_PREFIX);
        }
        let xv = g.constant(x);
        let gv = *self.backbone.forward_graph(&mut g, &self.params, xv, images.len()).last().unwrap();
        let grid = GridBatch { var: gv.var, batch: images.len(), h: gv.h, w: gv.w, c: gv.c };
        let batch = ProxyBatch { grid, text: text.as_ref(), targets: &targets, tp_rows: &tp_rows, tp_labels: tp_labels.as_ref() };
        let lv = self.model.loss(&mut g, &self.params, &batch, self.cfg.lambda as f32, Some(&mut rng))?;
        let scalar = |g: &Graph<f32>, v| g.value(v).at(0, 0) as f64;
        let l_mlm = lv.mlm.map(|v| scalar(&g, v));
        let l_tp = lv.tp.map(|v| scalar(&g, v));
        let total = scalar(&g, lv.total);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step: s, batch: batch_ids });
        }
        g.backward(lv.total);
        let grads = g.param_grads();
        let lr = self.cfg.schedule.lr_at(self.cfg.learning_rate, s, self.cfg.horizon());
        self.opt.step(&mut self.params, &grads, lr);
        self.step += 1;
        Ok(LossReport::new(s, l_mlm, l_tp, self.cfg.lambda, images.len(), lr))
    }
}

pub(crate) fn build_model(cfg: &TrainConfig, dims: ModelDims, lm: Option<&TextEncoder>) -> Result<Box<dyn ProxyModel<f32>>> {
    let vocab = lm.filter(|_| cfg.flavor.is_icmlm()).map(|lm| VocabTable::new(lm.vocab_table().clone()));
    ModelRegistry::<f32>::standard().build(cfg.flavor.name(), cfg.head_spec(dims.d_w, dims.k), vocab)
}

/// Trains from scratch for `cfg.steps` steps.
pub fn train(cfg: &TrainConfig, data: TrainData) -> Result<Checkpoint> {
    train_in(cfg, data, None)
}

/// Like `train`, saving into `dir` periodically and at the end.
pub fn train_in(cfg: &TrainConfig, data: TrainData, dir: Option<&Path>) -> Result<Checkpoint> {
    let mut t = Trainer::new(cfg.clone(), data)?;
    t.run(cfg.steps, dir)?;
    let ckpt = t.checkpoint();
    if let Some(dir) = dir {
        ckpt.save(dir)?;
    }
    Ok(ckpt)
}

/// Runs `extra_steps` more steps from a checkpoint.
pub fn resume(ckpt: Checkpoint, data: TrainData, extra_steps: u64) -> Result<Checkpoint> {
    resume_in(ckpt, None, data, extra_steps, None)
}

pub fn resume_in(ckpt: Checkpoint, cfg: Option<TrainConfig>, data: TrainData, extra_steps: u64, dir: Option<&Path>) -> Result<Checkpoint> {
    let mut cfg = cfg.unwrap_or_else(|| ckpt.config.clone());
    cfg.steps = cfg.steps.max(ckpt.step + extra_steps);
    let mut t = Trainer::from_checkpoint(ckpt, Some(cfg), data)?;
    t.run(extra_steps, dir)?;
    let ckpt = t.checkpoint();
    if let Some(dir) = dir {
        ckpt.save(dir)?;
    }
    Ok(ckpt)
}
