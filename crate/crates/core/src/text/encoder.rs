use icmlm_tensor::{softmax, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocabulary, CLS, MASK};
use crate::caption::TokenSequence;
use crate::error::{ensure, Error, Result};
use crate::nn::{self, AttentionOrder, EncoderLayerConfig, Segment};
use crate::optim::{optimizer_by_name, OptimConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Longest input including `[CLS]`.
    pub max_len: usize,
    pub dropout: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 64,
            layers: 2,
            heads: 4,
            head_dim: 16,
            max_len: 32,
            dropout: 0.1,
            steps: 1500,
            batch_size: 32,
            learning_rate: 2e-3,
            mask_prob: 0.15,
            seed: 0,
        }
    }
}

impl LmConfig {
    fn layer(&self) -> EncoderLayerConfig {
        EncoderLayerConfig {
            d_model: self.d_model,
            n_heads: self.heads,
            head_dim: self.head_dim,
            order: AttentionOrder::Conventional,
            dropout: self.dropout,
        }
    }
}

/// Contextual token features with `[CLS]` split off.
#[derive(Clone, Debug, PartialEq)]
pub struct TextFeatures {
    /// `T x d_w`, one row per input token.
    pub w: Tensor<f32>,
    pub cls: Vec<f32>,
    pub mask_index: Option<usize>,
}

/// The reference language model. Parameters are fixed once constructed.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    cfg: LmConfig,
    vocab: Vocabulary,
    params: ParamStore<f32>,
}

pub const VOCAB_TABLE: &str = "lm.tok_emb";

fn init_params(cfg: &LmConfig, vocab_size: usize) -> ParamStore<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamStore::new();
    p.insert(VOCAB_TABLE, Tensor::randn(vocab_size, cfg.d_model, 0.5, &mut rng));
    p.insert("lm.pos_emb", Tensor::randn(cfg.max_len, cfg.d_model, 0.1, &mut rng));
    nn::init_layer_norm(&mut p, "lm.emb_ln", cfg.d_model);
    let layer = cfg.layer();
    for i in 0..cfg.layers {
        nn::init_encoder_layer(&mut p, &format!("lm.layer{i}"), &layer, &mut rng);
    }
    p
}

/// Runs the encoder over `[CLS] + ids` for each sequence. Only the rows listed
/// in `outputs` (positions including `[CLS]`) are produced by the last layer.
fn forward(
    g: &mut Graph<f32>,
    p: &ParamStore<f32>,
    cfg: &LmConfig,
    seqs: &[Vec<usize>],
    outputs: &[Vec<usize>],
    mut rng: Option<&mut ChaCha8Rng>,
) -> Var {
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segs = Vec::new();
    for s in seqs {
        let start = ids.len();
        ids.push(CLS);
        ids.extend_from_slice(s);
        pos.extend(0..=s.len());
        segs.push(Segment::contiguous(start, s.len() + 1, (0..=s.len()).collect()));
    }
    let table = p.bind(g, VOCAB_TABLE);
    let pos_table = p.bind(g, "lm.pos_emb");
    let tok = g.gather_rows(table, &ids);
    let pe = g.gather_rows(pos_table, &pos);
    let x = g.add(tok, pe);
    let x = nn::layer_norm(g, p, "lm.emb_ln", x, cfg.d_model);
    let mut z = nn::dropout(g, x, cfg.dropout, rng.as_deref_mut());
    let layer = cfg.layer();
    for i in 0..cfg.layers {
        if i + 1 == cfg.layers {
            for (seg, out) in segs.iter_mut().zip(outputs) {
                seg.queries = out.clone();
            }
        }
        let name = format!("lm.layer{i}");
        z = nn::encoder_layer(g, p, &name, &layer, z, &segs, rng.as_deref_mut()).out;
        let mut start = 0;
        for seg in segs.iter_mut() {
            let n = seg.rows.len();
            *seg = Segment::contiguous(start, n, (0..n).collect());
            start += n;
        }
    }
    z
}

impl TextEncoder {
    pub fn from_parts(cfg: LmConfig, vocab: Vocabulary, params: ParamStore<f32>) -> Result<Self> {
        let table = params
            .get(VOCAB_TABLE)
            .ok_or_else(|| Error::Config(format!("language model parameters lack `{VOCAB_TABLE}`")))?;
        if table.shape() != (vocab.len(), cfg.d_model) {
            return Err(Error::Config(format!(
                "vocabulary table is {:?}, expected ({}, {})",
                table.shape(),
                vocab.len(),
                cfg.d_model
            )));
        }
        Ok(TextEncoder { cfg, vocab, params })
    }

    /// Plain masked-LM pretraining on the given captions, Adam with cosine decay.
    pub fn pretrain(seqs: &[TokenSequence], vocab: Vocabulary, cfg: LmConfig) -> Result<Self> {
        ensure!(!seqs.is_empty(), "language model pretraining needs at least one caption");
        ensure!(cfg.batch_size >= 1, "batch size must be positive");
        let mut params = init_params(&cfg, vocab.len());
        let encoded: Vec<Vec<usize>> = seqs
            .iter()
            .map(|s| vocab.encode(&s.tokens))
            .filter(|ids| ids.len() < cfg.max_len)
            .collect();
        ensure!(!encoded.is_empty(), "every caption exceeds max_len {}", cfg.max_len);
        let mut opt = optimizer_by_name("adam", OptimConfig { weight_decay: 0.0, ..Default::default() })?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6d);
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0;
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch_size);
            let mut targets = Vec::new();
            let mut outputs = Vec::new();
            for _ in 0..cfg.batch_size {
                if cursor == order.len() {
                    order = (0..encoded.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let mut ids = encoded[order[cursor]].clone();
                cursor += 1;
                let mut masked: Vec<usize> = (0..ids.len()).filter(|_| rng.random::<f64>() < cfg.mask_prob).collect();
                if masked.is_empty() {
                    masked.push(rng.random_range(0..ids.len()));
                }
                for &m in &masked {
                    targets.push(ids[m]);
                    ids[m] = MASK;
                }
                outputs.push(masked.iter().map(|m| m + 1).collect());
                batch.push(ids);
            }
            let mut g = Graph::new();
            let out = forward(&mut g, &params, &cfg, &batch, &outputs, Some(&mut rng));
            let table = params.bind(&mut g, VOCAB_TABLE);
            let logits = g.matmul_t(out, false, table, true);
            let mut onehot = Tensor::zeros(targets.len(), vocab.len());
            for (r, &t) in targets.iter().enumerate() {
                onehot.set(r, t, 1.0);
            }
            let loss = g.soft_cross_entropy(logits, onehot);
            let lv = g.value(loss).at(0, 0);
            if !lv.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch: Vec::new() });
            }
            if step % 250 == 0 {
                tracing::debug!(step, loss = lv, "lm pretraining");
            }
            g.backward(loss);
            let grads = g.param_grads();
            let lr = Schedule::Cosine.lr_at(cfg.learning_rate, step, cfg.steps);
            opt.step(&mut params, &grads, lr);
        }
        Ok(TextEncoder { cfg, vocab, params })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn d_w(&self) -> usize {
        self.cfg.d_model
    }

    /// The `|V| x d_w` token embedding table, tied to the output layer.
    pub fn vocab_table(&self) -> &Tensor<f32> {
        self.params.expect(VOCAB_TABLE)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn encode(&self, tokens: &[String], mask_index: Option<usize>) -> Result<TextFeatures> {
        self.encode_ids(&self.vocab.encode(tokens), mask_index)
    }

    pub fn encode_ids(&self, ids: &[usize], mask_index: Option<usize>) -> Result<TextFeatures> {
        ensure!(!ids.is_empty(), "cannot encode an empty token sequence");
        ensure!(ids.len() < self.cfg.max_len, "sequence of {} tokens exceeds max_len {}", ids.len(), self.cfg.max_len);
        let mut ids = ids.to_vec();
        if let Some(m) = mask_index {
            ensure!(m < ids.len(), "mask_index {m} out of range for {} tokens", ids.len());
            ids[m] = MASK;
        }
        let mut g = Graph::inference();
        let n = ids.len();
        let out = forward(&mut g, &self.params, &self.cfg, &[ids], &[(0..=n).collect()], None);
        let all = g.take_value(out);
        Ok(TextFeatures { cls: all.row(0).to_vec(), w: all.slice_rows(1, n), mask_index })
    }

    /// Dot products of `features` with every row of the vocabulary table.
    pub fn vocab_logits_reference(&self, features: &[f32]) -> Result<Vec<f32>> {
        vocab_logits(self.vocab_table(), features)
    }

    /// Text-only distribution over the vocabulary at a masked position.
    pub fn predict_masked(&self, tokens: &[String], mask_index: usize) -> Result<Vec<f32>> {
        let f = self.encode(tokens, Some(mask_index))?;
        Ok(softmax(&self.vocab_logits_reference(f.w.row(mask_index))?))
    }
}

pub fn vocab_logits(table: &Tensor<f32>, features: &[f32]) -> Result<Vec<f32>> {
    ensure!(
        features.len() == table.cols(),
        "feature dimension {} does not match vocabulary width {}",
        features.len(),
        table.cols()
    );
    Ok((0..table.rows()).map(|k| table.row(k).iter().zip(features).map(|(a, b)| a * b).sum()).collect())
}
