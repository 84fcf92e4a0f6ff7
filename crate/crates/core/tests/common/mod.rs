#![allow(dead_code)]

pub mod grad;

use icmlm::caption::{build_postag_concepts, build_postag_labels, build_triplets, prepare_captions, DictionaryTagger, LabelSet, MaskTriplet, PosTag, TokenSequence};
use icmlm::corpus::synthetic::{generate_synthetic_with, SynthOptions};
use icmlm::corpus::Dataset;
use icmlm::registry::Flavor;
use icmlm::text::{LmConfig, TextEncoder, Vocabulary};
use icmlm::trainer::{TrainConfig, TrainData};

pub struct Fixture {
    pub ds: Dataset,
    pub seqs: Vec<TokenSequence>,
    pub triplets: Vec<MaskTriplet>,
    pub labels: LabelSet,
    pub lm: TextEncoder,
}

impl Fixture {
    pub fn new(n_images: usize) -> Self {
        let ds = generate_synthetic_with(n_images, 7, &SynthOptions { image_size: 16, ..Default::default() });
        let prep = prepare_captions(&ds, &DictionaryTagger::synthetic()).unwrap();
        let vocab = Vocabulary::build(&prep.sequences);
        let lm_cfg = LmConfig { d_model: 16, layers: 1, heads: 2, head_dim: 8, steps: 20, batch_size: 8, ..Default::default() };
        let lm = TextEncoder::pretrain(&prep.sequences, vocab, lm_cfg).unwrap();
        let cs = build_postag_concepts(&prep.sequences, &[PosTag::Noun, PosTag::Adj], 100).unwrap();
        let labels = build_postag_labels(&ds, &prep.sequences, &cs);
        let triplets = build_triplets(&prep.sequences, &cs, lm.vocab()).triplets;
        Fixture { ds, seqs: prep.sequences, triplets, labels, lm }
    }

    pub fn data(&self) -> TrainData<'_> {
        TrainData { dataset: &self.ds, sequences: &self.seqs, triplets: &self.triplets, labels: Some(&self.labels), lm: Some(&self.lm) }
    }
}

/// A model small enough to train in well under a second per step.
pub fn tiny_config(flavor: Flavor, steps: u64) -> TrainConfig {
    TrainConfig {
        flavor,
        steps,
        batch_size: 4,
        triplets_per_image: 3,
        learning_rate: 0.05,
        warmup_steps: steps / 4,
        image_size: 16,
        widths: vec![4, 8, 8, 8],
        strides: vec![2, 2, 1, 2],
        heads: 2,
        d_z: 4,
        fc_hidden: 8,
        tfm_head_dim: 4,
        dropout: 0.0,
        tp_trunk_width: 8,
        log_every: 1,
        ..Default::default()
    }
}
