use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, Parser, Subcommand};
use icmlm::caption::{
    build_cluster_concepts, build_cluster_labels, build_postag_concepts, build_postag_labels, build_triplets, load_triplets, prepare_captions,
    save_triplets, tagger_by_name, ConceptSet, LabelSet, PosTag, PreparedCaptions,
};
use icmlm::corpus::synthetic::{generate_synthetic_with, Color, ShapeKind, SynthOptions};
use icmlm::corpus::{load_dataset, save_dataset, Dataset, Split};
use icmlm::eval::{
    eval_mtp, eval_mtp_text_only, linear_probe, pooled_features, random_backbone, render_table, shape_color_attributes,
    synthetic_labels, write_results, zero_shot_eval, AttributeMatrix, Metric, MtpScores, ProbeConfig, ProbeLabels, ProbeResult, SyntheticTask,
};
use icmlm::fusion::write_attention;
use icmlm::text::{LmConfig, TextEncoder, Vocabulary};
use icmlm::trainer::{load_lm, resume_in, save_lm, train_in, Checkpoint, MaskQuery, TrainConfig, TrainData, TrainedModel};
use icmlm::vision::{Backbone, PoolMode};
use icmlm::Error;
use icmlm_tensor::{ParamStore, Tensor};

use crate::config_overrides;

pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn user(msg: impl Into<String>) -> Self {
        CliError { code: 1, msg: msg.into() }
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::NonFiniteLoss { .. }) { 2 } else { 1 };
        CliError { code, msg: e.to_string() }
    }
}

type Outcome = Result<Vec<PathBuf>, CliError>;

#[derive(Parser)]
#[command(name = "icmlm", version, about = "Image-conditioned masked language modeling on a synthetic corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand)]
pub enum Cmd {
    /// Generate a synthetic shapes dataset.
    SynthGen(SynthGen),
    /// Build the concept set and per-image tag labels.
    BuildConcepts(BuildConcepts),
    /// Enumerate masked-token training triplets.
    BuildTriplets(BuildTriplets),
    /// Pretrain the text-only masked language model.
    PretrainLm(PretrainLm),
    /// Train a proxy-task model.
    Train(Train),
    /// Masked token prediction accuracy on held-out triplets.
    EvalMtp(EvalMtp),
    /// Linear probes on frozen backbone features.
    Probe(Probe),
    /// Zero-shot attribute classification on frozen features.
    ZeroShot(ZeroShot),
    /// Render the attention map for one masked caption.
    Attend(Attend),
}

impl Cmd {
    pub fn name(&self) -> &'static str {
        match self {
            Cmd::SynthGen(_) => "synth-gen",
            Cmd::BuildConcepts(_) => "build-concepts",
            Cmd::BuildTriplets(_) => "build-triplets",
            Cmd::PretrainLm(_) => "pretrain-lm",
            Cmd::Train(_) => "train",
            Cmd::EvalMtp(_) => "eval-mtp",
            Cmd::Probe(_) => "probe",
            Cmd::ZeroShot(_) => "zero-shot",
            Cmd::Attend(_) => "attend",
        }
    }

    pub fn seed(&self, train: Option<&ArgMatches>) -> Option<u64> {
        Some(match self {
            Cmd::SynthGen(c) => c.seed,
            Cmd::BuildConcepts(c) => c.seed,
            Cmd::BuildTriplets(c) => c.seed,
            Cmd::PretrainLm(c) => c.seed,
            Cmd::Train(c) => return c.config(train?).ok().map(|cfg| cfg.seed),
            Cmd::EvalMtp(c) => c.seed,
            Cmd::Probe(c) => c.seed,
            Cmd::ZeroShot(c) => c.seed,
            Cmd::Attend(c) => c.seed,
        })
    }

    /// Where `run.json` goes: inside directory outputs, next to file outputs.
    pub fn run_json(&self) -> PathBuf {
        match self {
            Cmd::SynthGen(c) => c.out.join("run.json"),
            Cmd::BuildConcepts(c) => c.out.join("run.json"),
            Cmd::BuildTriplets(c) => sibling(&c.out),
            Cmd::PretrainLm(c) => c.out.join("run.json"),
            Cmd::Train(c) => c.out.join("run.json"),
            Cmd::EvalMtp(c) => sibling(&c.out),
            Cmd::Probe(c) => sibling(&c.out),
            Cmd::ZeroShot(c) => sibling(&c.out),
            Cmd::Attend(c) => c.out.join("run.json"),
        }
    }

    pub fn inputs(&self) -> Vec<PathBuf> {
        let opt = |p: &Option<PathBuf>| p.iter().cloned().collect::<Vec<_>>();
        let mut v = match self {
            Cmd::SynthGen(_) => Vec::new(),
            Cmd::BuildConcepts(c) => [vec![c.data.clone()], opt(&c.lm)].concat(),
            Cmd::BuildTriplets(c) => vec![c.data.clone(), c.concepts.clone(), c.lm.clone()],
            Cmd::PretrainLm(c) => vec![c.data.clone()],
            Cmd::Train(c) => [vec![c.data.clone()], opt(&c.triplets), opt(&c.labels), opt(&c.lm), opt(&c.config), opt(&c.resume)].concat(),
            Cmd::EvalMtp(c) => [vec![c.data.clone(), c.triplets.clone()], opt(&c.ckpt), opt(&c.lm)].concat(),
            Cmd::Probe(c) => [vec![c.data.clone(), c.eval_data.clone()], opt(&c.model.ckpt), opt(&c.model.config)].concat(),
            Cmd::ZeroShot(c) => [vec![c.data.clone(), c.eval_data.clone()], opt(&c.model.ckpt), opt(&c.model.config)].concat(),
            Cmd::Attend(c) => vec![c.ckpt.clone(), c.data.clone()],
        };
        v.retain(|p| p.exists());
        v
    }

    pub fn run(&self, train: Option<&ArgMatches>) -> Outcome {
        match self {
            Cmd::SynthGen(c) => c.run(),
            Cmd::BuildConcepts(c) => c.run(),
            Cmd::BuildTriplets(c) => c.run(),
            Cmd::PretrainLm(c) => c.run(),
            Cmd::Train(c) => c.run(train.expect("train matches")),
            Cmd::EvalMtp(c) => c.run(),
            Cmd::Probe(c) => c.run(),
            Cmd::ZeroShot(c) => c.run(),
            Cmd::Attend(c) => c.run(),
        }
    }
}

fn sibling(file: &Path) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    file.with_file_name(format!("{stem}.run.json"))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).map_err(|e| CliError::user(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::user(format!("{what} not found: {}", path.display())))
    }
}

fn dataset(dir: &Path) -> Result<Dataset, CliError> {
    require(dir, "dataset")?;
    Ok(load_dataset(dir)?)
}

fn captions(ds: &Dataset, tagger: &str) -> Result<PreparedCaptions, CliError> {
    Ok(prepare_captions(ds, tagger_by_name(tagger)?.as_ref())?)
}

fn lm(dir: &Path) -> Result<TextEncoder, CliError> {
    require(dir, "language model")?;
    Ok(load_lm(dir)?)
}

fn checkpoint(dir: &Path) -> Result<Checkpoint, CliError> {
    require(dir, "checkpoint")?;
    Ok(Checkpoint::load(dir)?)
}

#[derive(Args)]
pub struct SynthGen {
    /// Number of images.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// train or val.
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long, default_value_t = 1)]
    min_shapes: usize,
    #[arg(long, default_value_t = 3)]
    max_shapes: usize,
}

impl SynthGen {
    fn run(&self) -> Outcome {
        let split = match self.split.as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            s => return Err(CliError::user(format!("unknown split `{s}` (available: train, val)"))),
        };
        if self.n == 0 || self.min_shapes == 0 || self.min_shapes > self.max_shapes || self.max_shapes > 9 {
            return Err(CliError::user("need n >= 1 and 1 <= min-shapes <= max-shapes <= 9"));
        }
        let opts = SynthOptions { min_shapes: self.min_shapes, max_shapes: self.max_shapes, image_size: self.image_size, split };
        let ds = generate_synthetic_with(self.n, self.seed, &opts);
        save_dataset(&ds, &self.out)?;
        tracing::info!(images = ds.images.len(), captions = ds.captions.len(), "dataset written");
        Ok(vec![self.out.clone()])
    }
}

#[derive(Args)]
pub struct BuildConcepts {
    #[arg(long)]
    data: PathBuf,
    /// Directory for concepts.tsv and labels.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// postag or cluster.
    #[arg(long, default_value = "postag")]
    mode: String,
    /// Concept count (postag: most frequent tokens; cluster: k-means clusters).
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Part-of-speech filter for postag concepts.
    #[arg(long, value_delimiter = ',', default_value = "NN,ADJ")]
    pos: Vec<String>,
    /// Language model whose [CLS] embeddings are clustered (cluster mode).
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    tagger: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl BuildConcepts {
    fn run(&self) -> Outcome {
        let ds = dataset(&self.data)?;
        let prep = captions(&ds, &self.tagger)?;
        let (concepts, labels) = match self.mode.as_str() {
            "postag" => {
                let pos = self.pos.iter().map(|p| p.parse::<PosTag>()).collect::<icmlm::Result<Vec<_>>>()?;
                let cs = build_postag_concepts(&prep.sequences, &pos, self.k)?;
                let labels = build_postag_labels(&ds, &prep.sequences, &cs);
                (cs, labels)
            }
            "cluster" => {
                let dir = self.lm.as_ref().ok_or_else(|| CliError::user("cluster mode needs --lm"))?;
                let lm = lm(dir)?;
                let mut rows = Vec::with_capacity(prep.sequences.len());
                for s in &prep.sequences {
                    rows.push(lm.encode(&s.tokens, None)?.cls.iter().map(|&v| v as f64).collect::<Vec<f64>>());
                }
                let km = build_cluster_concepts(&Tensor::from_rows(&rows), self.k, self.seed)?;
                let labels = build_cluster_labels(&ds, &prep.sequences, &km.assignments, self.k)?;
                (ConceptSet::from_clusters(&km.assignments, self.k), labels)
            }
            m => return Err(CliError::user(format!("unknown mode `{m}` (available: postag, cluster)"))),
        };
        fs::create_dir_all(&self.out).map_err(|e| CliError::user(format!("{}: {e}", self.out.display())))?;
        let (cpath, lpath) = (self.out.join("concepts.tsv"), self.out.join("labels.jsonl"));
        concepts.save(&cpath)?;
        labels.save(&lpath)?;
        tracing::info!(k = concepts.len(), labelled = labels.vectors.len(), excluded = labels.excluded.len(), "concepts written");
        Ok(vec![cpath, lpath])
    }
}

#[derive(Args)]
pub struct BuildTriplets {
    #[arg(long)]
    data: PathBuf,
    /// concepts.tsv from build-concepts.
    #[arg(long)]
    concepts: PathBuf,
    /// Pretrained language model directory (for its vocabulary).
    #[arg(long)]
    lm: PathBuf,
    /// Output JSON Lines file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    tagger: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl BuildTriplets {
    fn run(&self) -> Outcome {
        let ds = dataset(&self.data)?;
        require(&self.concepts, "concepts file")?;
        let cs = ConceptSet::load(&self.concepts)?;
        let lm = lm(&self.lm)?;
        let prep = captions(&ds, &self.tagger)?;
        let set = build_triplets(&prep.sequences, &cs, lm.vocab());
        ensure_parent(&self.out)?;
        save_triplets(&self.out, &set.triplets)?;
        tracing::info!(triplets = set.triplets.len(), skipped = set.skipped.len(), "triplets written");
        Ok(vec![self.out.clone()])
    }
}

#[derive(Args)]
pub struct PretrainLm {
    #[arg(long)]
    data: PathBuf,
    /// Output model directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = LmConfig::default().steps)]
    steps: u64,
    #[arg(long, default_value_t = LmConfig::default().d_model)]
    d_model: usize,
    #[arg(long, default_value_t = LmConfig::default().layers)]
    layers: usize,
    #[arg(long, default_value_t = LmConfig::default().heads)]
    heads: usize,
    #[arg(long, default_value_t = LmConfig::default().head_dim)]
    head_dim: usize,
    #[arg(long, default_value_t = LmConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = LmConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synthetic")]
    tagger: String,
}

impl PretrainLm {
    fn run(&self) -> Outcome {
        let ds = dataset(&self.data)?;
        let prep = captions(&ds, &self.tagger)?;
        let cfg = LmConfig {
            steps: self.steps,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            head_dim: self.head_dim,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            ..Default::default()
        };
        let lm = TextEncoder::pretrain(&prep.sequences, Vocabulary::build(&prep.sequences), cfg)?;
        save_lm(&self.out, &lm)?;
        let vocab = self.out.join("vocab.tsv");
        lm.vocab().save(&vocab)?;
        tracing::info!(vocab = lm.vocab().len(), checksum = %lm.checksum(), "language model written");
        Ok(vec![self.out.clone()])
    }
}

#[derive(Args)]
pub struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Masked-token triplets (JSON Lines); required by icmlm flavors.
    #[arg(long)]
    triplets: Option<PathBuf>,
    /// Tag labels (JSON Lines); required by tp flavors and by icmlm when lambda > 0.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Pretrained language model directory; required by icmlm flavors.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with config keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint up to `steps` total.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, default_value = "synthetic")]
    tagger: String,
}

impl Train {
    fn config(&self, m: &ArgMatches) -> Result<TrainConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => {
                require(p, "config file")?;
                TrainConfig::load(p)?
            }
            None => TrainConfig::default(),
        };
        for (k, v) in config_overrides(m) {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn run(&self, m: &ArgMatches) -> Outcome {
        let cfg = self.config(m)?;
        let icmlm = cfg.flavor.is_icmlm();
        let needs_labels = !icmlm || cfg.lambda > 0.0;
        let triplets = match (&self.triplets, icmlm) {
            (Some(p), true) => {
                require(p, "triplets file")?;
                load_triplets(p)?
            }
            (None, true) => return Err(CliError::user(format!("{} needs --triplets", cfg.flavor))),
            _ => Vec::new(),
        };
        let labels = match (&self.labels, needs_labels) {
            (Some(p), true) => {
                require(p, "labels file")?;
                Some(LabelSet::load(p)?)
            }
            (None, true) => return Err(CliError::user(format!("{} with lambda {} needs --labels", cfg.flavor, cfg.lambda))),
            _ => None,
        };
        let lm = match (&self.lm, icmlm) {
            (Some(p), true) => Some(lm(p)?),
            (None, true) => return Err(CliError::user(format!("{} needs --lm", cfg.flavor))),
            _ => None,
        };
        let ds = dataset(&self.data)?;
        let prep = captions(&ds, &self.tagger)?;
        let data = TrainData { dataset: &ds, sequences: &prep.sequences, triplets: &triplets, labels: labels.as_ref(), lm: lm.as_ref() };
        let ckpt = match &self.resume {
            Some(dir) => {
                let ck = checkpoint(dir)?;
                let extra = cfg.steps.saturating_sub(ck.step);
                resume_in(ck, Some(cfg.clone()), data, extra, Some(&self.out))?
            }
            None => train_in(&cfg, data, Some(&self.out))?,
        };
        if let Some(last) = ckpt.log.last() {
            tracing::info!(step = ckpt.step, l_total = last.l_total, "training finished");
        }
        fs::write(self.out.join("config.toml"), cfg.to_toml()).map_err(|e| CliError::user(e.to_string()))?;
        Ok(vec![self.out.clone()])
    }
}

fn mtp_rows(tag: &str, s: MtpScores) -> Vec<ProbeResult> {
    vec![
        ProbeResult { layer_tag: tag.into(), metric: Metric::Top1, value: s.top1, n_eval: s.n_eval },
        ProbeResult { layer_tag: tag.into(), metric: Metric::Top5, value: s.top5, n_eval: s.n_eval },
    ]
}

#[derive(Args)]
pub struct EvalMtp {
    /// Trained icmlm checkpoint.
    #[arg(long, conflicts_with = "lm", required_unless_present = "lm")]
    ckpt: Option<PathBuf>,
    /// Score the text-only language model instead.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Held-out dataset.
    #[arg(long)]
    data: PathBuf,
    /// Held-out triplets.
    #[arg(long)]
    triplets: PathBuf,
    /// Results file (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "synthetic")]
    tagger: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl EvalMtp {
    fn run(&self) -> Outcome {
        require(&self.triplets, "triplets file")?;
        let triplets = load_triplets(&self.triplets)?;
        let ds = dataset(&self.data)?;
        let prep = captions(&ds, &self.tagger)?;
        let rows = match (&self.ckpt, &self.lm) {
            (Some(dir), _) => {
                let model = TrainedModel::from_checkpoint(&checkpoint(dir)?)?;
                mtp_rows(model.flavor().name(), eval_mtp(&model, &ds, &prep.sequences, &triplets)?)
            }
            (None, Some(dir)) => mtp_rows("text_only", eval_mtp_text_only(&lm(dir)?, &prep.sequences, &triplets)?),
            (None, None) => return Err(CliError::user("give --ckpt or --lm")),
        };
        ensure_parent(&self.out)?;
        write_results(&self.out, &rows)?;
        print!("{}", render_table(&rows));
        Ok(vec![self.out.clone()])
    }
}

/// Which frozen backbone to read features from.
#[derive(Args)]
pub struct ModelArgs {
    /// Trained checkpoint.
    #[arg(long, conflicts_with = "random_init", required_unless_present = "random_init")]
    ckpt: Option<PathBuf>,
    /// Use a freshly initialized backbone instead.
    #[arg(long)]
    random_init: bool,
    /// Config giving the backbone shape for --random-init.
    #[arg(long)]
    config: Option<PathBuf>,
    /// global_average or spatial2x2.
    #[arg(long, default_value = "global_average")]
    pool: String,
}

impl ModelArgs {
    fn backbone(&self, seed: u64) -> Result<(Backbone, ParamStore<f32>), CliError> {
        match &self.ckpt {
            Some(dir) => {
                let ck = checkpoint(dir)?;
                let bb = Backbone::new(ck.config.backbone())?;
                Ok((bb, ck.params))
            }
            None => {
                let cfg = match &self.config {
                    Some(p) => TrainConfig::load(p)?,
                    None => TrainConfig::default(),
                };
                Ok(random_backbone(cfg.backbone(), seed)?)
            }
        }
    }

    fn pool_mode(&self) -> Result<PoolMode, CliError> {
        match self.pool.as_str() {
            "global_average" => Ok(PoolMode::GlobalAverage),
            "spatial2x2" => Ok(PoolMode::Spatial2x2),
            p => Err(CliError::user(format!("unknown pooling `{p}` (available: global_average, spatial2x2)"))),
        }
    }

    fn features(&self, seed: u64, ds: &Dataset) -> Result<Vec<(String, Vec<Vec<f32>>)>, CliError> {
        let (bb, params) = self.backbone(seed)?;
        let images: Vec<_> = ds.images.iter().collect();
        Ok(pooled_features(&bb, &params, &images, self.pool_mode()?)?)
    }
}

#[derive(Args)]
pub struct ProbeArgs {
    #[arg(long, default_value_t = ProbeConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = ProbeConfig::default().learning_rate)]
    learning_rate: f64,
    #[arg(long, default_value_t = ProbeConfig::default().weight_decay)]
    weight_decay: f64,
    #[arg(long, default_value_t = ProbeConfig::default().batch_size)]
    batch_size: usize,
}

impl ProbeArgs {
    fn config(&self, seed: u64) -> ProbeConfig {
        ProbeConfig { learning_rate: self.learning_rate, weight_decay: self.weight_decay, epochs: self.epochs, batch_size: self.batch_size, seed, ..Default::default() }
    }
}

#[derive(Args)]
pub struct Probe {
    /// Dataset the probe is fit on.
    #[arg(long)]
    data: PathBuf,
    /// Dataset the probe is scored on.
    #[arg(long)]
    eval_data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// shape, color, shape_color or tags.
    #[arg(long, default_value = "shape")]
    task: String,
    #[command(flatten)]
    probe: ProbeArgs,
    /// Results file (JSON Lines), one row per layer.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Probe {
    fn run(&self) -> Outcome {
        let task: SyntheticTask = self.task.parse()?;
        let (train, eval) = (dataset(&self.data)?, dataset(&self.eval_data)?);
        let (ty, ey) = (synthetic_labels(&train, task)?, synthetic_labels(&eval, task)?);
        let tf = self.model.features(self.seed, &train)?;
        let ef = self.model.features(self.seed, &eval)?;
        let cfg = self.probe.config(self.seed);
        let mut rows = Vec::new();
        for ((tag, tx), (_, ex)) in tf.iter().zip(&ef) {
            rows.push(linear_probe(tag, tx, &ty, ex, &ey, &cfg)?);
        }
        ensure_parent(&self.out)?;
        write_results(&self.out, &rows)?;
        print!("{}", render_table(&rows));
        Ok(vec![self.out.clone()])
    }
}

#[derive(Args)]
pub struct ZeroShot {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    /// Held-out shape:color classes, e.g. `circle:red,star:blue`.
    #[arg(long, value_delimiter = ',', required = true)]
    unseen: Vec<String>,
    /// Backbone block to read; defaults to the last one.
    #[arg(long)]
    layer: Option<String>,
    #[command(flatten)]
    probe: ProbeArgs,
    /// Result file (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn class_of(spec: &str) -> Result<usize, CliError> {
    let (s, c) = spec.split_once(':').ok_or_else(|| CliError::user(format!("`{spec}` is not shape:color")))?;
    let shape = ShapeKind::ALL.iter().find(|k| k.word() == s).ok_or_else(|| CliError::user(format!("unknown shape `{s}`")))?;
    let color = Color::ALL.iter().find(|k| k.word() == c).ok_or_else(|| CliError::user(format!("unknown color `{c}`")))?;
    Ok(shape.index() * Color::ALL.len() + color.index())
}

impl ZeroShot {
    fn run(&self) -> Outcome {
        let unseen = self.unseen.iter().map(|s| class_of(s)).collect::<Result<Vec<_>, _>>()?;
        let n = ShapeKind::ALL.len() * Color::ALL.len();
        let seen: Vec<usize> = (0..n).filter(|c| !unseen.contains(c)).collect();
        let attrs = AttributeMatrix::new(shape_color_attributes(), seen, unseen.clone())?;
        let (train, eval) = (dataset(&self.data)?, dataset(&self.eval_data)?);
        let labels = |ds: &Dataset| -> Result<Vec<usize>, CliError> {
            match synthetic_labels(ds, SyntheticTask::ShapeColor)? {
                ProbeLabels::Multiclass { labels, .. } => Ok(labels),
                ProbeLabels::Multilabel(_) => unreachable!(),
            }
        };
        let (ty, ey) = (labels(&train)?, labels(&eval)?);
        let pick = |layers: Vec<(String, Vec<Vec<f32>>)>| -> Result<(String, Vec<Vec<f32>>), CliError> {
            match &self.layer {
                Some(tag) => layers.into_iter().find(|(t, _)| t == tag).ok_or_else(|| CliError::user(format!("no layer `{tag}`"))),
                None => Ok(layers.into_iter().last().expect("at least one layer")),
            }
        };
        let (tag, tf) = pick(self.model.features(self.seed, &train)?)?;
        let (_, ef) = pick(self.model.features(self.seed, &eval)?)?;
        let keep: Vec<usize> = (0..ty.len()).filter(|&i| !unseen.contains(&ty[i])).collect();
        let tx: Vec<Vec<f32>> = keep.iter().map(|&i| tf[i].clone()).collect();
        let tyk: Vec<usize> = keep.iter().map(|&i| ty[i]).collect();
        let r = zero_shot_eval(&tx, &tyk, &ef, &ey, &attrs, &self.probe.config(self.seed))?;
        ensure_parent(&self.out)?;
        let json = serde_json::json!({ "layer_tag": tag, "unseen": self.unseen, "result": r });
        fs::write(&self.out, serde_json::to_string_pretty(&json).expect("json")).map_err(|e| CliError::user(e.to_string()))?;
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
        println!("top1 {:.2}  seen {}  unseen {}  n_eval {}", 100.0 * r.top1, pct(r.top1_seen), pct(r.top1_unseen), r.n_eval);
        Ok(vec![self.out.clone()])
    }
}

#[derive(Args)]
pub struct Attend {
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset holding the image.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    image_id: String,
    #[arg(long)]
    caption: String,
    /// Token of the caption to mask (first occurrence).
    #[arg(long)]
    mask_token: String,
    /// Output directory for the PNG and JSON sidecar.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Attend {
    fn run(&self) -> Outcome {
        let model = TrainedModel::from_checkpoint(&checkpoint(&self.ckpt)?)?;
        if !model.flavor().is_icmlm() {
            return Err(CliError::user(format!("{} has no attention to show", model.flavor())));
        }
        let ds = dataset(&self.data)?;
        let image = ds.image(&self.image_id).ok_or_else(|| CliError::user(format!("image `{}` not in the dataset", self.image_id)))?;
        let tokens = icmlm::caption::split_tokens(&self.caption);
        let mask_index = tokens
            .iter()
            .position(|t| *t == self.mask_token)
            .ok_or_else(|| CliError::user(format!("`{}` does not occur in the caption", self.mask_token)))?;
        let q = MaskQuery { image, caption_id: "cli", tokens: &tokens, mask_index };
        let pred = model.predict(&[q])?.pop().expect("one prediction");
        let stem = format!("{}_{}", self.image_id, mask_index);
        let (png, json) = write_attention(&self.out, &stem, image, &pred.attention)?;
        let vocab = model.lm().expect("icmlm checkpoints carry the language model").vocab();
        let mut order: Vec<usize> = (0..pred.probs.len()).collect();
        order.sort_by(|&a, &b| pred.probs[b].total_cmp(&pred.probs[a]).then(a.cmp(&b)));
        let top: Vec<_> = order.iter().take(5).map(|&i| serde_json::json!({ "token": vocab.token(i), "p": pred.probs[i] })).collect();
        let top_path = self.out.join(format!("{stem}.top5.json"));
        fs::write(&top_path, serde_json::to_string_pretty(&top).expect("json")).map_err(|e| CliError::user(e.to_string()))?;
        for t in &top {
            println!("{}\t{:.4}", t["token"].as_str().unwrap_or(""), t["p"].as_f64().unwrap_or(0.0));
        }
        Ok(vec![png, json, top_path])
    }
}
