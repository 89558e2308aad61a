//! Discriminator pretraining, the main training loops, model selection and
//! the forward-weight sweep.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpe::{hex_digest, MergeTable, TokenSeq};
use crate::checkpoint::ModelCheckpoint;
use crate::config::{from_kv, to_kv};
use crate::corpus::{flatten_pools, make_batches, make_unlabeled_batches, Batch, ParallelExample, UnlabeledPool};
use crate::decoding::DecodeConfig;
use crate::discriminator::{CnnClassifier, CnnConfig, Discriminator, LmConfig, StyleClassifier};
use crate::error::{Error, Result};
use crate::evaluation::{detok_bleu, perplexity, transfer_corpus};
use crate::model::{ModelConfig, Seq2Seq};
use crate::objectives::{LossBreakdown, LossWeights, Objective, PairRef, Translation, UnlabeledRef};
use crate::optim::{Adam, AdamConfig};
use crate::params::{splitmix, Dropout, DropoutPlan};
use crate::style::{Direction, StyleLabel};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    SemiSupervised,
    Unsupervised,
    SupervisedOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    LmDisc,
    CnnDisc,
    None,
}

// `variant = none` reaches serde as null
fn variant_or_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Variant, D::Error> {
    Ok(Option::<Variant>::deserialize(d)?.unwrap_or(Variant::None))
}

/// Generator architecture without the vocabulary size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub tie_weights: bool,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::desk(0);
        ModelShape {
            enc_layers: c.enc_layers,
            dec_layers: c.dec_layers,
            n_heads: c.n_heads,
            embed_dim: c.embed_dim,
            ffn_dim: c.ffn_dim,
            dropout: c.dropout,
            max_positions: c.max_positions,
            tie_weights: c.tie_weights,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            n_heads: self.n_heads,
            embed_dim: self.embed_dim,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            max_positions: self.max_positions,
            tie_weights: self.tie_weights,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmShape {
    pub n_layers: usize,
    pub n_heads: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub length_normalize: bool,
}

impl Default for LmShape {
    fn default() -> Self {
        let c = LmConfig::desk(0);
        LmShape {
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            embed_dim: c.embed_dim,
            ffn_dim: c.ffn_dim,
            dropout: c.dropout,
            max_positions: c.max_positions,
            length_normalize: c.length_normalize,
        }
    }
}

impl LmShape {
    pub fn config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            embed_dim: self.embed_dim,
            ffn_dim: self.ffn_dim,
            dropout: self.dropout,
            max_positions: self.max_positions,
            length_normalize: self.length_normalize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnShape {
    pub embed_dim: usize,
    pub channels: usize,
    pub n_layers: usize,
    pub kernel: usize,
    pub max_positions: usize,
}

impl Default for CnnShape {
    fn default() -> Self {
        let c = CnnConfig::desk(0);
        CnnShape {
            embed_dim: c.embed_dim,
            channels: c.channels,
            n_layers: c.n_layers,
            kernel: c.kernel,
            max_positions: c.max_positions,
        }
    }
}

impl CnnShape {
    pub fn config(&self, vocab_size: usize) -> CnnConfig {
        CnnConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            channels: self.channels,
            n_layers: self.n_layers,
            kernel: self.kernel,
            max_positions: self.max_positions,
        }
    }
}

/// Input and output files named by a config; only the command line reads
/// them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub merges: Option<PathBuf>,
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub valid_src: Option<PathBuf>,
    pub valid_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub unlabeled_source: Option<PathBuf>,
    pub unlabeled_target: Option<PathBuf>,
    pub heldout_source: Option<PathBuf>,
    pub heldout_target: Option<PathBuf>,
    pub discriminator: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: Mode,
    #[serde(deserialize_with = "variant_or_none")]
    pub variant: Variant,
    /// Epochs including discriminator pretraining.
    pub total_epochs: usize,
    pub pretrain_epochs: usize,
    pub max_tokens_per_batch: usize,
    /// Micro-batches accumulated per optimizer update.
    pub update_frequency: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub warmup_updates: u64,
    /// Linear decay to zero over the run after warmup.
    pub lr_decay: bool,
    pub disc_lr: f64,
    pub lambda_forward: f64,
    pub w_disc: f64,
    /// Defaults to 0.6 semi-supervised and 1.0 unsupervised.
    pub w_cycle: Option<f64>,
    pub translation: Translation,
    /// Unlabeled micro-batches per epoch; 0 pairs one with every parallel
    /// micro-batch, or takes a full pass when there is no parallel data.
    pub unlabeled_batches_per_epoch: usize,
    /// Denoising-autoencoder epochs before unsupervised training.
    pub dae_warmup_epochs: usize,
    pub dae_drop: f64,
    pub dae_shuffle: usize,
    /// Longest sentence accepted when loading data.
    pub max_len: usize,
    pub seed: u64,
    pub model: ModelShape,
    pub disc: LmShape,
    pub cnn: CnnShape,
    pub data: DataPaths,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainingConfig {
            mode: Mode::SemiSupervised,
            variant: Variant::LmDisc,
            total_epochs: 30,
            pretrain_epochs: 10,
            max_tokens_per_batch: 64,
            update_frequency: 4,
            learning_rate: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            clip_norm: adam.clip_norm,
            warmup_updates: adam.warmup_updates,
            lr_decay: true,
            disc_lr: 5e-4,
            lambda_forward: 0.8,
            w_disc: 1.0,
            w_cycle: None,
            translation: Translation::Mmi,
            unlabeled_batches_per_epoch: 0,
            dae_warmup_epochs: 0,
            dae_drop: 0.1,
            dae_shuffle: 3,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            seed: 1,
            model: ModelShape::default(),
            disc: LmShape::default(),
            cnn: CnnShape::default(),
            data: DataPaths::default(),
        }
    }
}

impl TrainingConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let c: TrainingConfig = from_kv(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> Result<String> {
        to_kv(self)
    }

    /// SHA-256 of the rendered config.
    pub fn hash(&self) -> String {
        hex_digest(self.to_text().unwrap_or_default().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.pretrain_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "pretrain_epochs {} must be below total_epochs {}",
                self.pretrain_epochs, self.total_epochs
            )));
        }
        if self.update_frequency == 0 {
            return Err(Error::Config("update_frequency must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.disc_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.max_tokens_per_batch == 0 {
            return Err(Error::Config("max_tokens_per_batch must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dae_drop) {
            return Err(Error::Config("dae_drop must be in [0, 1)".into()));
        }
        self.weights().validate()
    }

    pub fn main_epochs(&self) -> usize {
        self.total_epochs - self.pretrain_epochs
    }

    /// Loss weights with mode defaults applied; disabled terms get weight 0.
    pub fn weights(&self) -> LossWeights {
        let w_cycle = self.w_cycle.unwrap_or(match self.mode {
            Mode::Unsupervised => LossWeights::unsupervised().w_cycle,
            _ => LossWeights::semi_supervised().w_cycle,
        });
        let unlabeled = self.mode != Mode::SupervisedOnly;
        LossWeights {
            lambda_forward: self.lambda_forward,
            w_disc: if unlabeled && self.variant != Variant::None { self.w_disc } else { 0.0 },
            w_cycle: if unlabeled { w_cycle } else { 0.0 },
        }
    }

    pub fn adam(&self, total_updates: u64) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            clip_norm: self.clip_norm,
            warmup_updates: self.warmup_updates,
            total_updates: if self.lr_decay { total_updates } else { 0 },
        }
    }

    fn disc_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.disc_lr,
            warmup_updates: 0,
            clip_norm: 1.0,
            ..self.adam(0)
        }
    }
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix(seed), |acc, &p| splitmix(acc ^ p))
}

// ---- run log ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    Start {
        mode: Mode,
        config_hash: String,
        n_params: usize,
        seed: u64,
    },
    Pretrain {
        epoch: usize,
        loss: f64,
        heldout_accuracy: Option<f64>,
    },
    Step {
        phase: String,
        epoch: usize,
        update: u64,
        lr: f64,
        grad_norm: f64,
        loss: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        checkpoint: String,
        valid_ppl: Option<f64>,
        valid_cycle: Option<f64>,
    },
    Selected {
        checkpoint: String,
        epoch: usize,
        metric: f64,
    },
    Diverged {
        update: u64,
        checkpoint: Option<String>,
    },
}

/// JSON-lines training log, optionally mirrored to a file as it grows.
#[derive(Debug, Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    sink: Option<BufWriter<File>>,
}

impl PartialEq for RunLog {
    fn eq(&self, o: &Self) -> bool {
        self.records == o.records
    }
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        Ok(RunLog {
            records: Vec::new(),
            sink: Some(BufWriter::new(File::create(path)?)),
        })
    }

    pub fn push(&mut self, r: LogRecord) -> Result<()> {
        if let Some(w) = &mut self.sink {
            serde_json::to_writer(&mut *w, &r)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        self.records.push(r);
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut log = RunLog::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            if !line.trim().is_empty() {
                log.records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(log)
    }

    /// `(epoch, metric)` per validated epoch.
    pub fn epoch_metrics(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch {
                    epoch,
                    valid_ppl,
                    valid_cycle,
                    ..
                } => valid_ppl.or(*valid_cycle).map(|m| (*epoch, m)),
                _ => None,
            })
            .collect()
    }

    pub fn selected(&self) -> Option<(usize, f64)> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Selected { epoch, metric, .. } => Some((*epoch, *metric)),
            _ => None,
        })
    }

    /// Total loss of every optimizer step, in order.
    pub fn step_totals(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(loss.total),
                _ => None,
            })
            .collect()
    }
}

// ---- discriminator pretraining --------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    /// Percentage of held-out sentences classified correctly.
    pub heldout_accuracy: Option<f64>,
}

/// Percentage of sentences the classifier assigns to their own pool's style.
pub fn classifier_accuracy<T: Float, C: StyleClassifier<T>>(c: &C, pools: [&UnlabeledPool; 2]) -> Result<f64> {
    let (mut hit, mut n) = (0usize, 0usize);
    for pool in pools {
        let xs: Vec<&[u32]> = pool.sentences.iter().map(TokenSeq::ids).collect();
        for chunk in xs.chunks(64) {
            for p in c.target_probs(chunk)? {
                let said = if p > 0.5 { StyleLabel::Target } else { StyleLabel::Source };
                hit += usize::from(said == pool.style);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Empty("held-out pools"));
    }
    Ok(100.0 * hit as f64 / n as f64)
}

fn check_pools(pools: [&UnlabeledPool; 2]) -> Result<()> {
    if pools.iter().any(|p| p.is_empty()) {
        return Err(Error::Empty("unlabeled pool"));
    }
    if pools[0].style != StyleLabel::Source || pools[1].style != StyleLabel::Target {
        return Err(Error::Config("pools must be given as [source, target]".into()));
    }
    Ok(())
}

fn pretrain_batches(cfg: &TrainingConfig, pools: [&UnlabeledPool; 2], epoch: usize) -> Result<Vec<Batch>> {
    let items = flatten_pools(&pools);
    make_unlabeled_batches(&items, cfg.max_tokens_per_batch, Some(mix(cfg.seed, &[0xd15c, epoch as u64])), None)
}

fn batch_rows(b: &Batch) -> Vec<(&[u32], StyleLabel)> {
    (0..b.len()).map(|i| (b.src.row(i), b.styles[i])).collect()
}

/// Trains the language-model pair for `pretrain_epochs` and freezes it.
pub fn pretrain_discriminator(
    cfg: &TrainingConfig,
    vocab_size: usize,
    pools: [&UnlabeledPool; 2],
    heldout: Option<[&UnlabeledPool; 2]>,
    log: &mut RunLog,
) -> Result<(Discriminator<f32>, PretrainReport)> {
    check_pools(pools)?;
    let lm = cfg.disc.config(vocab_size);
    let mut d = Discriminator::<f32>::new(lm.clone(), mix(cfg.seed, &[0xd15c]))?;
    let mut opts = [Adam::new(cfg.disc_adam(), &d.lms[0].params), Adam::new(cfg.disc_adam(), &d.lms[1].params)];
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        heldout_accuracy: None,
    };
    let mut step = 0u64;
    for epoch in 1..=cfg.pretrain_epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        for b in pretrain_batches(cfg, pools, epoch)? {
            let plan = DropoutPlan {
                p: lm.dropout,
                seed: mix(cfg.seed, &[0xd15c]),
                step,
            };
            sum += d.pretrain_step(&batch_rows(&b), &mut opts, &mut plan.pass(1))?;
            n += 1;
            step += 1;
        }
        let loss = sum / n.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { update: step });
        }
        report.epoch_losses.push(loss);
        info!("discriminator epoch {epoch}: loss {loss:.4}");
        log.push(LogRecord::Pretrain {
            epoch,
            loss,
            heldout_accuracy: None,
        })?;
    }
    if cfg.pretrain_epochs == 0 {
        d.mark_pretrained();
    }
    d.freeze()?;
    if let Some(h) = heldout {
        let acc = classifier_accuracy(&d, h)?;
        report.heldout_accuracy = Some(acc);
        log.push(LogRecord::Pretrain {
            epoch: cfg.pretrain_epochs,
            loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            heldout_accuracy: Some(acc),
        })?;
    }
    Ok((d, report))
}

/// Pretrains the convolutional classifier of the ablation variant.
pub fn pretrain_cnn(
    cfg: &TrainingConfig,
    vocab_size: usize,
    pools: [&UnlabeledPool; 2],
    heldout: Option<[&UnlabeledPool; 2]>,
    log: &mut RunLog,
) -> Result<(CnnClassifier<f32>, PretrainReport)> {
    check_pools(pools)?;
    let mut c = CnnClassifier::<f32>::new(cfg.cnn.config(vocab_size), mix(cfg.seed, &[0xc44]))?;
    let mut opt = Adam::new(cfg.disc_adam(), &c.params);
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        heldout_accuracy: None,
    };
    for epoch in 1..=cfg.pretrain_epochs.max(1) {
        let (mut sum, mut n) = (0.0, 0usize);
        for b in pretrain_batches(cfg, pools, epoch)? {
            sum += c.pretrain_step(&batch_rows(&b), &mut opt)?;
            n += 1;
        }
        let loss = sum / n.max(1) as f64;
        report.epoch_losses.push(loss);
        log.push(LogRecord::Pretrain {
            epoch,
            loss,
            heldout_accuracy: None,
        })?;
    }
    c.freeze()?;
    if let Some(h) = heldout {
        report.heldout_accuracy = Some(classifier_accuracy(&c, h)?);
    }
    Ok((c, report))
}

// ---- gradient accumulation ------------------------------------------------------

/// One micro-batch: parallel (SOURCE, TARGET) pairs plus unlabeled sentences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MicroBatch {
    pub parallel: Vec<(Vec<u32>, Vec<u32>)>,
    pub unlabeled: Vec<(Vec<u32>, StyleLabel)>,
}

impl MicroBatch {
    pub fn len(&self) -> usize {
        self.parallel.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn from_batches(par: Option<&Batch>, unl: Option<&Batch>) -> Self {
        let mut m = MicroBatch::default();
        if let Some(b) = par {
            let tgt = b.tgt.as_ref().expect("parallel batch");
            m.parallel = (0..b.len()).map(|i| (b.src.row(i).to_vec(), tgt.row(i).to_vec())).collect();
        }
        if let Some(b) = unl {
            m.unlabeled = (0..b.len()).map(|i| (b.src.row(i).to_vec(), b.styles[i])).collect();
        }
        m
    }
}

/// How a micro-batch's loss is formed.
#[derive(Clone, Copy, Debug)]
pub struct LossSpec {
    pub weights: LossWeights,
    pub translation: Translation,
    pub dropout: f64,
    pub seed: u64,
}

/// Summed gradients and loss breakdown over micro-batches; micro-batch `i`
/// draws dropout for step `first_step + i`.
pub fn accumulate<T: Float, D: StyleClassifier<T>>(
    model: &Seq2Seq<T>,
    disc: Option<&D>,
    spec: &LossSpec,
    micro: &[MicroBatch],
    first_step: u64,
) -> Result<(Vec<Tensor<T>>, LossBreakdown)> {
    let mut grads = model.params.zeros_like();
    let mut bd = LossBreakdown::default();
    for (i, mb) in micro.iter().enumerate() {
        let mut obj = Objective::new(model, disc, spec.weights);
        obj.translation = spec.translation;
        obj.dropout = DropoutPlan {
            p: spec.dropout,
            seed: spec.seed,
            step: first_step + i as u64,
        };
        let pairs: Vec<PairRef> = mb.parallel.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
        let unl: Vec<UnlabeledRef> = mb.unlabeled.iter().map(|(x, s)| (x.as_slice(), *s)).collect();
        let mut g = crate::autograd::Graph::new();
        let v = model.bind(&mut g, true);
        let (loss, b) = obj.build(&mut g, &v, &pairs, &unl)?;
        bd.add(&b);
        if !b.total.is_finite() {
            return Ok((grads, bd));
        }
        g.backward(loss);
        for (acc, gr) in grads.iter_mut().zip(model.params.grads(&g, &v)) {
            acc.data.iter_mut().zip(&gr.data).for_each(|(a, &x)| *a += x);
        }
    }
    Ok((grads, bd))
}

/// Divides summed gradients by the number of sentences behind them.
pub fn normalize<T: Float>(grads: &mut [Tensor<T>], n_examples: usize) {
    let s = T::f(1.0 / n_examples.max(1) as f64);
    for g in grads {
        g.data.iter_mut().for_each(|x| *x = *x * s);
    }
}

// ---- denoising warmup -------------------------------------------------------------

/// Word dropout followed by a local shuffle where no token moves more than
/// `k` places.
pub fn add_noise<R: Rng>(x: &[u32], drop: f64, k: usize, rng: &mut R) -> Vec<u32> {
    let mut kept: Vec<u32> = x.iter().copied().filter(|_| rng.random::<f64>() >= drop).collect();
    if kept.is_empty() && !x.is_empty() {
        kept.push(x[rng.random_range(0..x.len())]);
    }
    if k > 0 {
        let keys: Vec<f64> = (0..kept.len()).map(|i| i as f64 + rng.random::<f64>() * (k as f64 + 1.0)).collect();
        let mut order: Vec<usize> = (0..kept.len()).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
        kept = order.into_iter().map(|i| kept[i]).collect();
    }
    kept
}

fn dae_gradients<T: Float>(model: &Seq2Seq<T>, mb: &MicroBatch, noisy: &[Vec<u32>], drop: &mut Dropout) -> Result<(Vec<Tensor<T>>, f64)> {
    let mut g = crate::autograd::Graph::new();
    let v = model.bind(&mut g, true);
    let srcs: Vec<&[u32]> = noisy.iter().map(Vec::as_slice).collect();
    let tgts: Vec<&[u32]> = mb.unlabeled.iter().map(|u| u.0.as_slice()).collect();
    let styles: Vec<StyleLabel> = mb.unlabeled.iter().map(|u| u.1).collect();
    let f = model.teacher_forced(&mut g, &v, &srcs, &tgts, &styles, drop)?;
    let rows = Seq2Seq::row_nll(&mut g, &f, true);
    let loss = g.sum(rows);
    g.backward(loss);
    Ok((model.params.grads(&g, &v), g.value(loss).item().as_f64()))
}

// ---- main loop --------------------------------------------------------------------

pub struct TrainData<'a> {
    pub train: &'a [ParallelExample],
    pub valid: &'a [ParallelExample],
    /// `[source, target]`.
    pub pools: [&'a UnlabeledPool; 2],
    /// Unlabeled validation pools; selection data for unsupervised runs.
    pub valid_pools: Option<[&'a UnlabeledPool; 2]>,
    /// Recorded in written checkpoints.
    pub merge_hash: &'a str,
}

pub struct TrainOutcome<T> {
    pub best: Seq2Seq<T>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub last: ModelCheckpoint<T>,
}

fn epoch_micro_batches(cfg: &TrainingConfig, data: &TrainData, epoch: usize) -> Result<Vec<MicroBatch>> {
    let par = match cfg.mode {
        Mode::Unsupervised => Vec::new(),
        _ => make_batches(data.train, cfg.max_tokens_per_batch, Some(mix(cfg.seed, &[0xba7c, epoch as u64])))?,
    };
    let unl = if cfg.mode == Mode::SupervisedOnly {
        Vec::new()
    } else {
        let items = flatten_pools(&data.pools);
        let limit = match (cfg.unlabeled_batches_per_epoch, par.len()) {
            (0, 0) => None,
            (0, n) => Some(n),
            (n, _) => Some(n),
        };
        make_unlabeled_batches(&items, cfg.max_tokens_per_batch, Some(mix(cfg.seed, &[0x0e1a, epoch as u64])), limit)?
    };
    let n = par.len().max(unl.len());
    Ok((0..n).map(|i| MicroBatch::from_batches(par.get(i), unl.get(i))).collect())
}

/// Mean per-token cyclic reconstruction loss over the pools.
pub fn cycle_metric<T: Float>(model: &Seq2Seq<T>, pools: [&UnlabeledPool; 2]) -> Result<f64> {
    let w = LossWeights {
        lambda_forward: 1.0,
        w_disc: 0.0,
        w_cycle: 1.0,
    };
    let (mut sum, mut n) = (0.0, 0usize);
    for pool in pools {
        let xs: Vec<(&[u32], StyleLabel)> = pool.sentences.iter().map(|s| (s.ids(), pool.style)).collect();
        for chunk in xs.chunks(32) {
            let bd = crate::objectives::total_loss::<T, Discriminator<T>>(model, None, w, &[], chunk)?;
            sum += bd.cycle;
            n += chunk.len() - bd.n_cycle_skipped;
        }
    }
    if n == 0 {
        return Err(Error::Empty("validation pools"));
    }
    Ok(sum / n as f64)
}

fn validate_epoch<T: Float>(cfg: &TrainingConfig, model: &Seq2Seq<T>, data: &TrainData) -> Result<(Option<f64>, Option<f64>)> {
    match cfg.mode {
        Mode::Unsupervised => {
            let pools = data.valid_pools.ok_or(Error::Empty("validation pools"))?;
            Ok((None, Some(cycle_metric(model, pools)?)))
        }
        _ => Ok((Some(perplexity(model, data.valid, Direction::SourceToTarget)?), None)),
    }
}

/// Main training. Semi-supervised and supervised-only runs select the epoch
/// with the lowest validation perplexity (SOURCE→TARGET); unsupervised runs
/// the one with the lowest validation cycle loss.
pub fn train<T: Float, D: StyleClassifier<T>>(
    cfg: &TrainingConfig,
    model: Seq2Seq<T>,
    data: &TrainData,
    disc: Option<&D>,
    log: &mut RunLog,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let weights = cfg.weights();
    match cfg.mode {
        Mode::Unsupervised if !data.train.is_empty() => {
            return Err(Error::Config("unsupervised mode takes no parallel data".into()));
        }
        Mode::Unsupervised => check_pools(data.pools)?,
        _ if data.train.is_empty() => return Err(Error::EmptyCorpus),
        _ => {}
    }
    if cfg.mode == Mode::SemiSupervised {
        check_pools(data.pools)?;
    }
    if weights.w_disc > 0.0 && disc.is_none() {
        return Err(Error::NotPretrained);
    }
    if cfg.mode != Mode::Unsupervised && data.valid.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let disc = if weights.w_disc > 0.0 { disc } else { None };
    let disc_hash = disc.map(|d| d.hash());

    let mut model = model;
    let spec = LossSpec {
        weights,
        translation: cfg.translation,
        dropout: model.config.dropout,
        seed: cfg.seed,
    };
    let updates_per_epoch = epoch_micro_batches(cfg, data, 1)?.len().div_ceil(cfg.update_frequency) as u64;
    let dae_epochs = if cfg.mode == Mode::Unsupervised { cfg.dae_warmup_epochs } else { 0 };
    let total_updates = updates_per_epoch * (cfg.main_epochs() + dae_epochs) as u64;
    let mut opt = Adam::new(cfg.adam(total_updates), &model.params);
    log.push(LogRecord::Start {
        mode: cfg.mode,
        config_hash: cfg.hash(),
        n_params: model.params.count(),
        seed: cfg.seed,
    })?;

    let mut step = 0u64;
    let mut last_good: Option<String> = None;
    let save = |m: &Seq2Seq<T>, o: &Adam<T>, epoch: usize, name: &str| -> Result<Option<String>> {
        match out_dir {
            Some(dir) => {
                let ck = ModelCheckpoint {
                    model: m.clone(),
                    optimizer: Some(o.clone()),
                    epoch,
                    merge_hash: data.merge_hash.to_string(),
                };
                let path = dir.join(name);
                ck.save(&path)?;
                Ok(Some(path.display().to_string()))
            }
            None => Ok(None),
        }
    };
    let diverged = |log: &mut RunLog, update: u64, last: &Option<String>| -> Result<Error> {
        log.push(LogRecord::Diverged {
            update,
            checkpoint: last.clone(),
        })?;
        Ok(Error::Divergence { update })
    };

    for epoch in 1..=dae_epochs {
        let micro = epoch_micro_batches(cfg, data, epoch + 10_000)?;
        for (ci, chunk) in micro.chunks(cfg.update_frequency).enumerate() {
            let mut grads = model.params.zeros_like();
            let mut bd = LossBreakdown::default();
            for (i, mb) in chunk.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, &[0xdae, epoch as u64, ci as u64, i as u64]));
                let noisy: Vec<Vec<u32>> = mb.unlabeled.iter().map(|u| add_noise(&u.0, cfg.dae_drop, cfg.dae_shuffle, &mut rng)).collect();
                let plan = DropoutPlan {
                    p: spec.dropout,
                    seed: cfg.seed,
                    step,
                };
                let (g, l) = dae_gradients(&model, mb, &noisy, &mut plan.pass(5))?;
                step += 1;
                for (a, x) in grads.iter_mut().zip(g) {
                    a.data.iter_mut().zip(&x.data).for_each(|(a, &x)| *a += x);
                }
                bd.cycle += l;
                bd.total += l;
                bd.n_unlabeled += mb.unlabeled.len();
            }
            if !bd.total.is_finite() {
                return Err(diverged(log, opt.step + 1, &last_good)?);
            }
            normalize(&mut grads, bd.n_unlabeled);
            let grad_norm = opt.update(&mut model.params, &grads);
            log.push(LogRecord::Step {
                phase: "dae".into(),
                epoch,
                update: opt.step,
                lr: opt.config.lr_at(opt.step),
                grad_norm,
                loss: bd,
            })?;
        }
        info!("denoising warmup epoch {epoch} done");
    }

    let mut best: Option<(Seq2Seq<T>, usize, f64)> = None;
    for epoch in 1..=cfg.main_epochs() {
        let micro = epoch_micro_batches(cfg, data, epoch)?;
        let mut epoch_loss = LossBreakdown::default();
        for chunk in micro.chunks(cfg.update_frequency) {
            let (mut grads, bd) = accumulate(&model, disc, &spec, chunk, step)?;
            step += chunk.len() as u64;
            if !bd.total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(log, opt.step + 1, &last_good)?);
            }
            normalize(&mut grads, bd.n_parallel + bd.n_unlabeled);
            let grad_norm = opt.update(&mut model.params, &grads);
            epoch_loss.add(&bd);
            log.push(LogRecord::Step {
                phase: "main".into(),
                epoch,
                update: opt.step,
                lr: opt.config.lr_at(opt.step),
                grad_norm,
                loss: bd,
            })?;
        }
        if !model.params.is_finite() {
            return Err(diverged(log, opt.step, &last_good)?);
        }
        let (ppl, cyc) = validate_epoch(cfg, &model, data)?;
        let metric = ppl.or(cyc).expect("one validation metric");
        if !metric.is_finite() {
            return Err(diverged(log, opt.step, &last_good)?);
        }
        let id = format!("epoch-{epoch}");
        if let Some(p) = save(&model, &opt, epoch, "last.ckpt")? {
            last_good = Some(p);
        }
        info!(
            "epoch {epoch}: loss/sentence {:.4} valid {metric:.4}",
            epoch_loss.total / (epoch_loss.n_parallel + epoch_loss.n_unlabeled).max(1) as f64
        );
        log.push(LogRecord::Epoch {
            epoch,
            checkpoint: id,
            valid_ppl: ppl,
            valid_cycle: cyc,
        })?;
        if best.as_ref().is_none_or(|b| metric < b.2) {
            save(&model, &opt, epoch, "best.ckpt")?;
            best = Some((model.clone(), epoch, metric));
        }
    }
    if let (Some(d), Some(h)) = (disc, disc_hash) {
        debug_assert_eq!(d.hash(), h);
    }
    let (best_model, best_epoch, best_metric) = best.ok_or(Error::Config("no training epochs".into()))?;
    log.push(LogRecord::Selected {
        checkpoint: format!("epoch-{best_epoch}"),
        epoch: best_epoch,
        metric: best_metric,
    })?;
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_metric,
        last: ModelCheckpoint {
            model,
            optimizer: Some(opt),
            epoch: cfg.main_epochs(),
            merge_hash: data.merge_hash.to_string(),
        },
    })
}

/// Unsupervised training: no parallel term, selection by cycle loss.
pub fn train_unsupervised<T: Float, D: StyleClassifier<T>>(
    cfg: &TrainingConfig,
    model: Seq2Seq<T>,
    data: &TrainData,
    disc: Option<&D>,
    log: &mut RunLog,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    if cfg.mode != Mode::Unsupervised {
        return Err(Error::Config("train_unsupervised needs mode = unsupervised".into()));
    }
    train(cfg, model, data, disc, log, out_dir)
}

// ---- forward-weight sweep -------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub test_bleu: f64,
    pub valid_ppl: f64,
    pub best_epoch: usize,
    pub params_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// The same run with the plain translation loss.
    pub plain: SweepRow,
    /// Step losses and selected weights of λ = 1 equal the plain run's.
    pub plain_matches_lambda_one: bool,
}

/// Parses `start:stop:step` into an inclusive grid.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = s
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::Config(format!("grid {s:?}: {e}"))))
        .collect::<Result<_>>()?;
    let [a, b, step] = parts[..] else {
        return Err(Error::Config(format!("grid {s:?}: expected start:stop:step")));
    };
    if !(step > 0.0) || b < a {
        return Err(Error::Config(format!("grid {s:?}: empty or non-increasing")));
    }
    let n = ((b - a) / step + 1e-9).floor() as usize;
    // round to the step's decimals so 0.1 * 3 prints as 0.3
    let grid: Vec<f64> = (0..=n).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect();
    for &l in &grid {
        if !(0.0..=1.0).contains(&l) {
            return Err(Error::LambdaOutOfRange(l));
        }
    }
    Ok(grid)
}

/// Trains one model per λ from the same seed and reports test BLEU.
#[allow(clippy::too_many_arguments)]
pub fn lambda_sweep<D: StyleClassifier<f32>>(
    cfg: &TrainingConfig,
    table: &MergeTable,
    data: &TrainData,
    test: &[ParallelExample],
    disc: Option<&D>,
    lambdas: &[f64],
    decode: &DecodeConfig,
) -> Result<SweepResult> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let run = |lambda: f64, translation: Translation| -> Result<(SweepRow, Vec<f64>)> {
        let c = TrainingConfig {
            lambda_forward: lambda,
            translation,
            ..cfg.clone()
        };
        let model = Seq2Seq::<f32>::init(c.model.config(table.vocab_size()), c.seed)?;
        let mut log = RunLog::new();
        let data = TrainData {
            merge_hash: &table.hash(),
            ..*data
        };
        let out = train(&c, model, &data, disc, &mut log, None)?;
        let hyps = transfer_corpus(&out.best, test, Direction::SourceToTarget, decode)?;
        let bleu = detok_bleu(table, &hyps, test, Direction::SourceToTarget)?;
        info!("lambda {lambda} ({translation:?}): test BLEU {bleu:.2}");
        Ok((
            SweepRow {
                lambda,
                test_bleu: bleu,
                valid_ppl: out.best_metric,
                best_epoch: out.best_epoch,
                params_hash: out.best.params.hash(),
            },
            log.step_totals(),
        ))
    };
    let mut rows = Vec::new();
    let mut lambda_one: Option<(SweepRow, Vec<f64>)> = None;
    for &l in lambdas {
        let (row, steps) = run(l, Translation::Mmi)?;
        if l == 1.0 {
            lambda_one = Some((row.clone(), steps));
        }
        rows.push(row);
    }
    let (plain, plain_steps) = run(1.0, Translation::Plain)?;
    let lambda_one = match lambda_one {
        Some(x) => x,
        None => run(1.0, Translation::Mmi)?,
    };
    let same_steps = lambda_one.1.len() == plain_steps.len() && lambda_one.1.iter().zip(&plain_steps).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok(SweepResult {
        plain_matches_lambda_one: same_steps && lambda_one.0.params_hash == plain.params_hash,
        rows,
        plain,
    })
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda,test_bleu,valid_ppl,best_epoch,params_hash\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.4},{:.6},{},{}\n", r.lambda, r.test_bleu, r.valid_ppl, r.best_epoch, r.params_hash));
        }
        s
    }

    /// Line plot of test BLEU against λ.
    pub fn plot_svg(&self, path: &Path) -> Result<()> {
        use plotters::prelude::*;
        let plot_err = |e: &dyn std::fmt::Display| crate::error::format_err("plot", e.to_string());
        let lo = self.rows.iter().map(|r| r.test_bleu).fold(f64::INFINITY, f64::min);
        let hi = self.rows.iter().map(|r| r.test_bleu).fold(f64::NEG_INFINITY, f64::max);
        let pad = ((hi - lo) * 0.1).max(0.5);
        let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Test BLEU by forward-translation weight", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(0.0f64..1.05, (lo - pad)..(hi + pad))
            .map_err(|e| plot_err(&e))?;
        chart
            .configure_mesh()
            .x_desc("lambda")
            .y_desc("BLEU")
            .draw()
            .map_err(|e| plot_err(&e))?;
        let pts: Vec<(f64, f64)> = self.rows.iter().map(|r| (r.lambda, r.test_bleu)).collect();
        chart.draw_series(LineSeries::new(pts.clone(), &BLUE)).map_err(|e| plot_err(&e))?;
        chart
            .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, BLUE.filled())))
            .map_err(|e| plot_err(&e))?;
        root.present().map_err(|e| plot_err(&e))?;
        Ok(())
    }
}
