//! Epoch loops for the two autoencoders and the translator, checkpoint
//! selection by lowest validation loss, and reconstruction metrics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tokenct_core::autoencoder::{Autoencoder, AutoencoderConfig};
use tokenct_core::numerics::{cosine_warmup_lr, Adam, AdamConfig, Tensor};
use tokenct_core::phantom::{outline_mask, OUTLINE_THRESHOLD_HU};
use tokenct_core::preprocess::{HuWindow, Split, ValueKind, Volume};
use tokenct_core::translator::{build_sequence, SequenceLayout, TranslationSequence, Translator, TranslatorConfig};

use crate::dataset::{load_samples, Sample};
use crate::error::{Error, Result};
use crate::io::checkpoint::{autoencoder_checkpoint, translator_checkpoint, Checkpoint};
use crate::io::text::{format_list, Config};
use crate::pipeline::{tokenize_dir, TOKENS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Vq2d,
    Vq3d,
    Gpt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vq2d => "vq2d",
            Stage::Vq3d => "vq3d",
            Stage::Gpt => "gpt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vq2d" => Some(Stage::Vq2d),
            "vq3d" => Some(Stage::Vq3d),
            "gpt" => Some(Stage::Gpt),
            _ => None,
        }
    }

    pub fn checkpoint_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.ckpt", self.name()))
    }

    pub fn report_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.csv", self.name()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Linear warmup, then cosine decay to zero.
    CosineWarmup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub stage: Stage,
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: AdamConfig,
    pub schedule: Schedule,
    /// Warmup length as a fraction of all steps.
    pub warmup: f64,
    pub seed: u64,
    pub data: PathBuf,
    pub checkpoints: PathBuf,
    /// Entries used fewer times than this between resets are re-seeded.
    pub min_usage: u64,
    /// Optimizer steps between dead-code resets; 0 disables them.
    pub reset_every: usize,
    /// Resets only happen within this leading fraction of all steps.
    pub reset_until: f64,
    pub log_max: f64,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub beta: f64,
    pub l1_weight: f64,
    pub blocks: usize,
    pub heads: usize,
    pub embed: usize,
    pub dropout: f64,
}

const KEYS: &[&str] = &[
    "batch", "epochs", "lr", "optimizer", "beta1", "beta2", "eps", "weight_decay", "schedule", "warmup", "seed", "data",
    "checkpoints", "min_usage", "reset_every", "reset_until", "log_max", "codebook_size", "latent_dim", "beta", "l1_weight",
    "blocks", "heads", "embed", "dropout",
];

impl RunConfig {
    /// Small-data defaults for 32³ phantoms.
    pub fn desk(stage: Stage) -> Self {
        let ae = AutoencoderConfig::desk_3d();
        let gpt = TranslatorConfig::desk();
        let (batch, lr, optimizer, schedule) = match stage {
            Stage::Vq2d => (8, 1e-3, AdamConfig::adam(), Schedule::Constant),
            Stage::Vq3d => (4, 1e-3, AdamConfig::adam(), Schedule::Constant),
            Stage::Gpt => (4, 1e-3, AdamConfig::adamw(), Schedule::CosineWarmup),
        };
        Self {
            stage,
            batch,
            epochs: 30,
            lr,
            optimizer,
            schedule,
            warmup: 0.05,
            seed: 0,
            data: "data".into(),
            checkpoints: "checkpoints".into(),
            min_usage: 1,
            reset_every: 50,
            reset_until: 0.5,
            log_max: tokenct_core::drr::DEFAULT_LOG_MAX,
            codebook_size: ae.codebook_size,
            latent_dim: ae.latent_dim,
            beta: ae.beta,
            l1_weight: ae.l1_weight,
            blocks: gpt.blocks,
            heads: gpt.heads,
            embed: gpt.embed,
            dropout: gpt.dropout,
        }
    }

    /// Batch sizes, optimizers, learning rates, schedules and epochs for
    /// full-scale training, with full-scale codebook and transformer sizes.
    pub fn full_scale(stage: Stage) -> Self {
        let gpt = TranslatorConfig::full_scale();
        let (batch, lr, optimizer, schedule, epochs) = match stage {
            Stage::Vq2d => (50, 5e-6, AdamConfig::adam(), Schedule::Constant, 500),
            Stage::Vq3d => (2, 5e-6, AdamConfig::adam(), Schedule::Constant, 500),
            Stage::Gpt => (12, 6e-4, AdamConfig::adamw(), Schedule::CosineWarmup, 300),
        };
        Self {
            batch,
            lr,
            optimizer,
            schedule,
            epochs,
            codebook_size: 8192,
            blocks: gpt.blocks,
            heads: gpt.heads,
            embed: gpt.embed,
            ..Self::desk(stage)
        }
    }

    /// Desk defaults overridden by `cfg`; unknown keys are rejected.
    pub fn from_config(stage: Stage, cfg: &Config) -> Result<Self> {
        if let Some(k) = cfg.keys().find(|k| !KEYS.contains(k)) {
            return Err(Error::Config(format!("unknown training setting {k:?}")));
        }
        let mut c = Self::desk(stage);
        macro_rules! take {
            ($($field:ident),*) => {$(
                if let Some(v) = cfg.value(stringify!($field))? {
                    c.$field = v;
                }
            )*};
        }
        take!(batch, epochs, lr, warmup, seed, data, checkpoints, min_usage, reset_every, reset_until, log_max);
        take!(codebook_size, latent_dim, beta, l1_weight, blocks, heads, embed, dropout);
        if let Some(o) = cfg.get("optimizer") {
            c.optimizer = match o {
                "adam" => AdamConfig::adam(),
                "adamw" => AdamConfig::adamw(),
                _ => return Err(Error::Config(format!("unknown optimizer {o:?}"))),
            };
        }
        if let Some(v) = cfg.value("beta1")? {
            c.optimizer.beta1 = v;
        }
        if let Some(v) = cfg.value("beta2")? {
            c.optimizer.beta2 = v;
        }
        if let Some(v) = cfg.value("eps")? {
            c.optimizer.eps = v;
        }
        if let Some(v) = cfg.value("weight_decay")? {
            c.optimizer.weight_decay = v;
        }
        if let Some(s) = cfg.get("schedule") {
            c.schedule = match s {
                "constant" | "none" => Schedule::Constant,
                "cosine" => Schedule::CosineWarmup,
                _ => return Err(Error::Config(format!("unknown schedule {s:?}"))),
            };
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch == 0 || self.epochs == 0 {
            return bad("batch and epochs must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup) || !(0.0..=1.0).contains(&self.reset_until) {
            return bad("warmup must be in [0, 1) and reset_until in [0, 1]");
        }
        if !(self.log_max > 0.0) {
            return bad("log_max must be positive");
        }
        Ok(())
    }

    fn autoencoder(&self, extents: Vec<usize>) -> AutoencoderConfig {
        let base = if extents.len() == 2 { AutoencoderConfig::desk_2d() } else { AutoencoderConfig::desk_3d() };
        AutoencoderConfig {
            extents,
            codebook_size: self.codebook_size,
            latent_dim: self.latent_dim,
            beta: self.beta,
            l1_weight: self.l1_weight,
            ..base
        }
    }
}

/// Learning rate for every step of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub schedule: Schedule,
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(schedule: Schedule, base: f64, warmup_fraction: f64, total: usize) -> Self {
        let warmup = ((total as f64 * warmup_fraction).floor() as usize).min(total.saturating_sub(1));
        Self { schedule, base, warmup, total }
    }

    pub fn at(&self, step: usize) -> Result<f64> {
        match self.schedule {
            Schedule::Constant => Ok(self.base),
            Schedule::CosineWarmup => Ok(cosine_warmup_lr(step, self.warmup, self.total, self.base)?),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub seconds: f64,
    pub usage: Option<f64>,
}

impl EpochReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,lr,seconds,usage";

    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{},{},{},{},{:.3},{}", self.epoch, self.train_loss, opt(self.val_loss), self.lr, self.seconds, opt(self.usage))
    }

    /// The loss checkpoint selection minimizes: validation loss when a
    /// validation split exists, otherwise the epoch's mean training loss.
    pub fn selection_loss(&self) -> f64 {
        self.val_loss.unwrap_or(self.train_loss)
    }
}

pub fn reports_csv(reports: &[EpochReport]) -> String {
    let mut s = format!("{}\n", EpochReport::CSV_HEADER);
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Outcome of one training epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub train_loss: f64,
    pub usage: Option<f64>,
}

/// A stage-specific model together with its data.
pub trait Trainer {
    fn stage(&self) -> Stage;
    fn steps_per_epoch(&self) -> usize;
    /// One pass over the training data; `lr` yields the rate for each step.
    fn train_epoch(&mut self, lr: &mut dyn FnMut() -> Result<f64>) -> Result<EpochStats>;
    /// Mean validation loss, `None` without a validation split.
    fn validation_loss(&self) -> Result<Option<f64>>;
    fn checkpoint(&self) -> Checkpoint;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub reports: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub checkpoint: PathBuf,
    pub lr_trace: Vec<f64>,
    pub checkpoints_written: usize,
}

/// Runs `cfg.epochs` epochs, writing `{stage}.ckpt` whenever the selection
/// loss improves and `{stage}.csv` after every epoch.
pub fn run_epochs(trainer: &mut dyn Trainer, cfg: &RunConfig) -> Result<RunSummary> {
    let stage = trainer.stage();
    let dir = &cfg.checkpoints;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = stage.checkpoint_path(dir);
    let schedule = LrSchedule::new(cfg.schedule, cfg.lr, cfg.warmup, cfg.epochs * trainer.steps_per_epoch());
    let mut lr_trace = Vec::with_capacity(schedule.total);
    let mut reports: Vec<EpochReport> = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut written = 0;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let stats = trainer.train_epoch(&mut || {
            let lr = schedule.at(lr_trace.len())?;
            lr_trace.push(lr);
            Ok(lr)
        })?;
        let val_loss = trainer.validation_loss()?;
        let report = EpochReport {
            epoch,
            train_loss: stats.train_loss,
            val_loss,
            lr: lr_trace.last().copied().unwrap_or(0.0),
            seconds: start.elapsed().as_secs_f64(),
            usage: stats.usage,
        };
        let loss = report.selection_loss();
        if !loss.is_finite() {
            return Err(tokenct_core::Error::Numerical(format!("{} epoch {epoch}: loss is {loss}", stage.name())).into());
        }
        if best.is_none_or(|(_, b)| loss < b) {
            best = Some((epoch, loss));
            let mut ck = trainer.checkpoint();
            ck.set("epoch", epoch);
            ck.set("selection_loss", loss);
            ck.save(&path)?;
            written += 1;
        }
        reports.push(report);
        let csv = stage.report_path(dir);
        std::fs::write(&csv, reports_csv(&reports)).map_err(|e| Error::io(&csv, e))?;
    }
    let (best_epoch, best_loss) = best.expect("at least one epoch");
    Ok(RunSummary { reports, best_epoch, best_loss, checkpoint: path, lr_trace, checkpoints_written: written })
}

/// Autoencoder training on single-channel images or volumes.
pub struct AeTrainer {
    stage: Stage,
    pub model: Autoencoder<f32>,
    opt: Adam<f32>,
    train: Vec<Vec<f32>>,
    val: Vec<Vec<f32>>,
    batch: usize,
    rng: ChaCha8Rng,
    seed: u64,
    min_usage: u64,
    reset_every: usize,
    reset_until: usize,
    step: usize,
    last_reset: usize,
    header: Vec<(&'static str, String)>,
}

fn as_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

impl AeTrainer {
    pub fn new(stage: Stage, config: AutoencoderConfig, train: Vec<Vec<f32>>, val: Vec<Vec<f32>>, cfg: &RunConfig) -> Result<Self> {
        let size: usize = config.extents.iter().product();
        if train.is_empty() {
            return Err(tokenct_core::Error::Data("no training samples".into()).into());
        }
        if let Some(x) = train.iter().chain(&val).find(|x| x.len() != size) {
            return Err(tokenct_core::Error::Data(format!("sample of {} values, model expects {:?}", x.len(), config.extents)).into());
        }
        let steps = cfg.epochs * train.len().div_ceil(cfg.batch);
        Ok(Self {
            stage,
            model: Autoencoder::new(config, cfg.seed)?,
            opt: Adam::new(cfg.optimizer),
            train,
            val,
            batch: cfg.batch,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
            seed: cfg.seed,
            min_usage: cfg.min_usage,
            reset_every: cfg.reset_every,
            reset_until: (steps as f64 * cfg.reset_until) as usize,
            step: 0,
            last_reset: 0,
            header: Vec::new(),
        })
    }

    /// Extra checkpoint header entries.
    pub fn with_header(mut self, header: Vec<(&'static str, String)>) -> Self {
        self.header = header;
        self
    }

    fn tensor(&self, items: &[&Vec<f32>]) -> Result<Tensor<f32>> {
        let mut shape = vec![items.len(), 1];
        shape.extend_from_slice(&self.model.config().extents);
        Ok(Tensor::new(&shape, items.iter().flat_map(|x| x.iter().copied()).collect())?)
    }
}

impl Trainer for AeTrainer {
    fn stage(&self) -> Stage {
        self.stage
    }

    fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.batch)
    }

    fn train_epoch(&mut self, lr: &mut dyn FnMut() -> Result<f64>) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let n = self.model.codebook.size();
        let mut used = vec![false; n];
        let mut latents = Vec::new();
        let mut total = 0.0;
        for chunk in order.chunks(self.batch) {
            let x = self.tensor(&chunk.iter().map(|&i| &self.train[i]).collect::<Vec<_>>())?;
            let (stats, f) = self.model.train_step(&x, &mut self.opt, lr()?)?;
            for &k in &f.indices {
                used[k] = true;
            }
            latents.extend_from_slice(f.graph.value(f.latents).data());
            total += stats.total * chunk.len() as f64;
            self.step += 1;
        }
        if self.reset_every > 0 && self.step <= self.reset_until && self.step - self.last_reset >= self.reset_every {
            self.model.reset_dead_codes(&latents, self.min_usage, &mut self.rng)?;
            self.last_reset = self.step;
        }
        let usage = used.iter().filter(|&&u| u).count() as f64 / n as f64;
        Ok(EpochStats { train_loss: total / self.train.len() as f64, usage: Some(usage) })
    }

    fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        let mut total = 0.0;
        for chunk in self.val.chunks(self.batch) {
            let x = self.tensor(&chunk.iter().collect::<Vec<_>>())?;
            total += self.model.evaluate(&x)?.total * chunk.len() as f64;
        }
        Ok(Some(total / self.val.len() as f64))
    }

    fn checkpoint(&self) -> Checkpoint {
        let extra: Vec<(&str, String)> = self.header.iter().map(|(k, v)| (*k, v.clone())).collect();
        autoencoder_checkpoint(&self.model, self.stage.name(), self.seed, &extra)
    }
}

/// Next-token training on complete translation sequences.
pub struct GptTrainer {
    pub model: Translator<f32>,
    layout: SequenceLayout,
    opt: Adam<f32>,
    train: Vec<TranslationSequence>,
    val: Vec<TranslationSequence>,
    batch: usize,
    rng: ChaCha8Rng,
    seed: u64,
}

impl GptTrainer {
    pub fn new(layout: SequenceLayout, train: Vec<TranslationSequence>, val: Vec<TranslationSequence>, cfg: &RunConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(tokenct_core::Error::Data("no training sequences".into()).into());
        }
        let config = TranslatorConfig {
            blocks: cfg.blocks,
            heads: cfg.heads,
            embed: cfg.embed,
            context: layout.len(),
            codebook_size: layout.codebook_size,
            dropout: cfg.dropout,
        };
        Ok(Self {
            model: Translator::new(config, cfg.seed)?,
            layout,
            opt: Adam::new(cfg.optimizer),
            train,
            val,
            batch: cfg.batch,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed),
            seed: cfg.seed,
        })
    }
}

impl Trainer for GptTrainer {
    fn stage(&self) -> Stage {
        Stage::Gpt
    }

    fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.batch)
    }

    fn train_epoch(&mut self, lr: &mut dyn FnMut() -> Result<f64>) -> Result<EpochStats> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for chunk in order.chunks(self.batch) {
            let batch: Vec<TranslationSequence> = chunk.iter().map(|&i| self.train[i].clone()).collect();
            let loss = self.model.train_step(&batch, &mut self.opt, lr()?, &mut self.rng)?;
            total += loss * chunk.len() as f64;
        }
        Ok(EpochStats { train_loss: total / self.train.len() as f64, usage: None })
    }

    fn validation_loss(&self) -> Result<Option<f64>> {
        if self.val.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.model.evaluate(&self.val)?))
    }

    fn checkpoint(&self) -> Checkpoint {
        translator_checkpoint(&self.model, &self.layout, self.seed, &[])
    }
}

fn split_of(samples: &[Sample], split: Split) -> impl Iterator<Item = &Sample> {
    samples.iter().filter(move |s| s.entry.split == split)
}

/// Trains one stage from the dataset in `cfg.data`, keeping the best
/// checkpoint in `cfg.checkpoints`.
pub fn train_stage(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    match cfg.stage {
        Stage::Vq2d | Stage::Vq3d => {
            let samples = load_samples(&cfg.data, cfg.log_max)?;
            let Some(first) = samples.first() else {
                return Err(tokenct_core::Error::Data(format!("{} lists no samples", cfg.data.display())).into());
            };
            let mut trainer = if cfg.stage == Stage::Vq2d {
                let views = |s: &Sample| [as_f32(&s.pa.pixels), as_f32(&s.lat.pixels)];
                let train = split_of(&samples, Split::Train).flat_map(views).collect();
                let val = split_of(&samples, Split::Validation).flat_map(views).collect();
                let config = cfg.autoencoder(first.pa.extents.to_vec());
                let header = vec![("log_max", cfg.log_max.to_string())];
                AeTrainer::new(Stage::Vq2d, config, train, val, cfg)?.with_header(header)
            } else {
                let vol = |s: &Sample| as_f32(s.normalized.voxels());
                let train = split_of(&samples, Split::Train).map(vol).collect();
                let val = split_of(&samples, Split::Validation).map(vol).collect();
                let config = cfg.autoencoder(first.normalized.extents().to_vec());
                let w = HuWindow::default();
                let header = vec![("spacing", format_list(&first.normalized.spacing())), ("window", format_list(&[w.min, w.max]))];
                AeTrainer::new(Stage::Vq3d, config, train, val, cfg)?.with_header(header)
            };
            run_epochs(&mut trainer, cfg)
        }
        Stage::Gpt => {
            for s in [Stage::Vq2d, Stage::Vq3d] {
                let p = s.checkpoint_path(&cfg.checkpoints);
                if !p.exists() {
                    return Err(Error::Dependency(format!("the gpt stage needs {}; train {} first", p.display(), s.name())));
                }
            }
            let tokens = tokenize_dir(&cfg.data, &cfg.checkpoints, cfg.log_max)?;
            tokens.save(cfg.checkpoints.join(TOKENS))?;
            let layout = SequenceLayout::new(tokens.pa, tokens.lat, tokens.ct, tokens.codebook_size)?;
            let mut train = Vec::new();
            let mut val = Vec::new();
            for r in &tokens.records {
                let seq = build_sequence(&r.pa, &r.lat, &r.ct)?;
                match r.split {
                    Split::Train => train.push(seq),
                    Split::Validation => val.push(seq),
                    Split::Test => {}
                }
            }
            let mut trainer = GptTrainer::new(layout, train, val, cfg)?;
            run_epochs(&mut trainer, cfg)
        }
    }
}

/// Voxel agreement between a reference and a reconstructed volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    /// Mean absolute error in normalized units.
    pub mae: f64,
    /// Peak signal-to-noise ratio over the [−1, 1] range, capped at 100 dB.
    pub psnr: f64,
    /// Dice overlap of the outline masks.
    pub dice: f64,
}

pub const PSNR_CAP_DB: f64 = 100.0;

fn normalized_values(v: &Volume) -> Result<Vec<f64>> {
    match v.kind {
        ValueKind::Normalized => Ok(v.voxels().to_vec()),
        ValueKind::Hounsfield => Ok(v.voxels().iter().map(|&x| HuWindow::default().to_unit(x)).collect()),
        k => Err(tokenct_core::Error::Data(format!("cannot compare {k:?} volumes")).into()),
    }
}

/// Dice of two binary masks; two empty masks overlap perfectly.
pub fn dice(a: &[f64], b: &[f64]) -> f64 {
    let (mut inter, mut sum) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        inter += x * y;
        sum += x + y;
    }
    if sum == 0.0 {
        1.0
    } else {
        2.0 * inter / sum
    }
}

pub fn evaluate_reconstruction(truth: &Volume, pred: &Volume) -> Result<Metrics> {
    if truth.extents() != pred.extents() {
        return Err(tokenct_core::Error::Dimension(format!("extents {:?} and {:?} differ", truth.extents(), pred.extents())).into());
    }
    let (a, b) = (normalized_values(truth)?, normalized_values(pred)?);
    let n = a.len() as f64;
    let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    let psnr = if mse == 0.0 { PSNR_CAP_DB } else { (10.0 * (4.0 / mse).log10()).min(PSNR_CAP_DB) };
    let ma = outline_mask(truth, OUTLINE_THRESHOLD_HU)?;
    let mb = outline_mask(pred, OUTLINE_THRESHOLD_HU)?;
    Ok(Metrics { mae, psnr, dice: dice(ma.voxels(), mb.voxels()) })
}
