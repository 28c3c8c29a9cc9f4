//! Training and evaluation loops.
//!
//! One optimization step composes a batch of canvases, reconstructs them from
//! their visible patches, takes the masked MSE, clips gradients and applies
//! AdamW at the scheduled learning rate. Runs are single-threaded, so a seed
//! fixes every byte they write.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::canvas::{compose, patchify, CanvasLayout};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::config::{DatasetSpec, RunConfig};
use crate::data::{fit_labels, gen_shapes, load_idx, load_pnm_dir, split, LabeledImage, Vocabulary};
use crate::decode::{infer_batch, InferOptions};
use crate::error::{Error, Result};
use crate::glyphfont::GlyphFont;
use crate::mae::{MaeModel, Reconstructor};
use crate::metrics::EvalReport;
use crate::nn::Graph;
use crate::optim::{clip_grad_norm, AdamW, Schedule};
use crate::scalar::Scalar;

pub const METRICS_HEADER: &str = "step,epoch,loss,lr,fw,ftc,fc";

/// Train and test samples with labels cut to the layout's cell count.
#[derive(Debug, Clone)]
pub struct Datasets<T> {
    pub train: Vec<LabeledImage<T>>,
    pub test: Vec<LabeledImage<T>>,
    pub vocabulary: Vocabulary,
}

impl<T: Scalar> Datasets<T> {
    /// Fits labels across both splits so they share one vocabulary.
    pub fn new(train: Vec<LabeledImage<T>>, test: Vec<LabeledImage<T>>, font: &GlyphFont, label_cells: usize) -> Result<Self> {
        let n_train = train.len();
        let mut all = train;
        all.extend(test);
        let vocabulary = fit_labels(&mut all, font, label_cells)?;
        let test = all.split_off(n_train);
        if all.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        Ok(Self { train: all, test, vocabulary })
    }

    pub fn load(spec: &DatasetSpec, font: &GlyphFont, label_cells: usize) -> Result<Self> {
        let (train, test) = match spec {
            DatasetSpec::Shapes { n_train, n_test, side, seed } => {
                if *n_train == 0 || *side == 0 {
                    return Err(Error::InvalidConfig("shapes need n_train >= 1 and side >= 1".into()));
                }
                (gen_shapes(*n_train, *seed, *side), gen_shapes(*n_test, seed.wrapping_add(1), *side))
            }
            DatasetSpec::Idx { train_images, train_labels, test_images, test_labels, digit_style, limit } => {
                let mut train = load_idx(train_images, train_labels, *digit_style)?;
                let mut test = load_idx(test_images, test_labels, *digit_style)?;
                if let Some(n) = limit {
                    train.truncate(*n);
                    test.truncate(*n);
                }
                (train, test)
            }
            DatasetSpec::Pnm { dir, labels, train_fraction, split_seed } => {
                split(load_pnm_dir(dir, labels)?, *train_fraction, *split_seed)?
            }
        };
        Self::new(train, test, font, label_cells)
    }
}

/// Sample order for one epoch; depends only on the seed and the epoch index.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Model, optimizer and position in the run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub config: RunConfig,
    pub model: MaeModel<T>,
    pub optimizer: AdamW<T>,
    pub schedule: Option<Schedule>,
    /// Completed epochs.
    pub epoch: usize,
    pub global_step: usize,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh model initialized from `config.seed`, scheduled for `n_train` samples per epoch.
    pub fn new(config: RunConfig, n_train: usize, font: &GlyphFont) -> Result<Self> {
        config.validate(font)?;
        let model = MaeModel::new(config.model.clone(), config.seed)?;
        let optimizer = AdamW::new(config.optimizer, model.params());
        let schedule = Self::make_schedule(&config, n_train)?;
        Ok(Self { config, model, optimizer, schedule, epoch: 0, global_step: 0 })
    }

    /// Continues from a checkpoint written by a run with the same architecture.
    pub fn resume(config: RunConfig, ckpt: Checkpoint<T>, n_train: usize, font: &GlyphFont) -> Result<Self> {
        config.validate(font)?;
        if ckpt.header.model != config.model || ckpt.header.layout != config.layout {
            return Err(Error::ConfigMismatch("checkpoint architecture or layout differs from the config".into()));
        }
        let optimizer = ckpt.optimizer.unwrap_or_else(|| AdamW::new(config.optimizer, ckpt.model.params()));
        let schedule = Self::make_schedule(&config, n_train)?;
        Ok(Self {
            config,
            model: ckpt.model,
            optimizer,
            schedule,
            epoch: ckpt.header.epoch,
            global_step: ckpt.header.global_step,
        })
    }

    fn make_schedule(config: &RunConfig, n_train: usize) -> Result<Option<Schedule>> {
        let total = config.epochs * steps_per_epoch(n_train, config.batch_size);
        if total == 0 {
            return Ok(None);
        }
        let s = &config.schedule;
        let schedule = match s.warmup_steps {
            Some(w) => Schedule::with_warmup(s.max_lr, s.min_lr, total, w)?,
            None => Schedule::new(s.max_lr, s.min_lr, total)?,
        };
        Ok(Some(schedule))
    }

    pub fn lr(&self) -> Result<f64> {
        match &self.schedule {
            Some(s) => s.lr_at(self.global_step),
            None => Ok(self.config.schedule.max_lr),
        }
    }

    /// One forward/backward/update on `batch`.
    pub fn train_step(&mut self, batch: &[&LabeledImage<T>], font: &GlyphFont) -> Result<StepStats> {
        let layout = &self.config.layout;
        let mut inputs = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        let mut masked = Vec::new();
        for s in batch {
            let c = compose(&s.image, &s.label, layout, font)?;
            inputs.push(patchify(&c.canvas, layout)?);
            targets.push(patchify(&c.target, layout)?);
            masked = c.masked_patch_ids;
        }
        let mut g = Graph::new();
        let loss = self.model.loss_graph(&mut g, &inputs, &targets, &masked, self.config.loss_scope)?;
        let loss_value = g.value(loss).item()?.as_f64();
        let grads = g.backward(loss)?;
        let params = self.model.params_mut();
        params.zero_grads();
        params.accumulate(&g, &grads);
        let grad_norm = clip_grad_norm(params, self.config.clip_norm);
        let lr = self.lr()?;
        self.optimizer.step(self.model.params_mut(), lr)?;
        self.global_step += 1;
        Ok(StepStats { loss: loss_value, lr, grad_norm })
    }

    /// Runs epoch `self.epoch` over `train`, logging every `log_every` steps.
    pub fn run_epoch(
        &mut self,
        train: &[LabeledImage<T>],
        font: &GlyphFont,
        mut on_step: impl FnMut(usize, usize, &StepStats) -> Result<()>,
    ) -> Result<Vec<StepStats>> {
        let order = epoch_order(self.config.seed, self.epoch, train.len());
        let mut stats = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&LabeledImage<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let s = self.train_step(&batch, font)?;
            if self.global_step % self.config.log_every == 0 {
                on_step(self.global_step, self.epoch + 1, &s)?;
            }
            stats.push(s);
        }
        self.epoch += 1;
        Ok(stats)
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint {
            header: CheckpointHeader {
                model: self.config.model.clone(),
                layout: self.config.layout.clone(),
                epoch: self.epoch,
                global_step: self.global_step,
                optimizer: None,
            },
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
        }
    }
}

/// Runs inference over `samples` in batches and scores the decoded labels.
pub fn evaluate<T: Scalar, M: Reconstructor<T> + ?Sized>(
    model: &M,
    samples: &[LabeledImage<T>],
    layout: &CanvasLayout,
    font: &GlyphFont,
    brightness: f64,
    batch_size: usize,
) -> Result<EvalReport> {
    let mut pairs = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let images: Vec<_> = chunk.iter().map(|s| &s.image).collect();
        let preds = infer_batch(model, &images, layout, font, InferOptions { brightness })?;
        pairs.extend(preds.into_iter().zip(chunk).map(|(p, s)| (p.decoded, s.label.clone())));
    }
    EvalReport::from_pairs(&pairs)
}

/// CSV log with the fixed metrics header; eval columns stay blank on training rows.
pub struct MetricsLog {
    out: BufWriter<File>,
}

impl MetricsLog {
    /// Creates the file with its header, or appends to an existing one.
    pub fn open(path: impl AsRef<Path>, append: bool) -> Result<Self> {
        let path = path.as_ref();
        let fresh = !append || !path.exists();
        let file = if fresh { File::create(path)? } else { OpenOptions::new().append(true).open(path)? };
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(Self { out })
    }

    pub fn step(&mut self, step: usize, epoch: usize, s: &StepStats) -> Result<()> {
        writeln!(self.out, "{step},{epoch},{},{},,,", s.loss, s.lr)?;
        Ok(())
    }

    pub fn eval(&mut self, step: usize, epoch: usize, r: &EvalReport) -> Result<()> {
        writeln!(self.out, "{step},{epoch},,,{},{},{}", r.fw, r.ftc, r.fc)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Files a training run writes under its output directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint(&self, epoch: usize) -> PathBuf {
        self.checkpoints().join(format!("epoch-{epoch:04}.ocad"))
    }

    /// Text file naming the newest checkpoint.
    pub fn latest(&self) -> PathBuf {
        self.checkpoints().join("latest")
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        match std::fs::read_to_string(self.latest()) {
            Ok(name) => Ok(Some(self.checkpoints().join(name.trim()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub global_step: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub last_eval: Option<EvalReport>,
    pub final_checkpoint: Option<PathBuf>,
}

fn save_checkpoint<T: Scalar>(trainer: &Trainer<T>, paths: &RunPaths) -> Result<PathBuf> {
    let path = paths.checkpoint(trainer.epoch);
    trainer.checkpoint().save(&path)?;
    let name = path.file_name().expect("checkpoint file name").to_string_lossy().into_owned();
    std::fs::write(paths.latest(), format!("{name}\n"))?;
    Ok(path)
}

/// Full training run. With `out`, writes the effective config, metrics CSV,
/// per-epoch checkpoints and the latest evaluation; with `resume`, continues
/// from the newest checkpoint there.
pub fn run_training<T: Scalar>(
    config: RunConfig,
    data: &Datasets<T>,
    font: &GlyphFont,
    out: Option<&Path>,
    resume: bool,
) -> Result<(Trainer<T>, TrainSummary)> {
    let paths = out.map(RunPaths::new);
    let mut trainer = match paths.as_ref().map(RunPaths::latest_checkpoint).transpose()?.flatten() {
        Some(ckpt) if resume => Trainer::resume(config, Checkpoint::load(ckpt)?, data.train.len(), font)?,
        _ => Trainer::new(config, data.train.len(), font)?,
    };
    let mut log = match &paths {
        Some(p) => {
            std::fs::create_dir_all(p.checkpoints())?;
            std::fs::write(p.config(), trainer.config.to_toml()?)?;
            Some(MetricsLog::open(p.metrics(), resume)?)
        }
        None => None,
    };
    let mut summary = TrainSummary {
        epochs_run: 0,
        global_step: trainer.global_step,
        first_loss: None,
        last_loss: None,
        last_eval: None,
        final_checkpoint: None,
    };
    if let (Some(p), 0) = (&paths, trainer.epoch) {
        summary.final_checkpoint = Some(save_checkpoint(&trainer, p)?);
    }
    while trainer.epoch < trainer.config.epochs {
        let stats = trainer.run_epoch(&data.train, font, |step, epoch, s| match &mut log {
            Some(l) => l.step(step, epoch, s),
            None => Ok(()),
        })?;
        summary.epochs_run += 1;
        summary.first_loss = summary.first_loss.or(stats.first().map(|s| s.loss));
        summary.last_loss = stats.last().map(|s| s.loss).or(summary.last_loss);
        let mut reached_target = false;
        if trainer.config.eval_each_epoch && !data.test.is_empty() {
            let c = &trainer.config;
            let report = evaluate(&trainer.model, &data.test, &c.layout, font, c.brightness, c.batch_size)?;
            if let Some(l) = &mut log {
                l.eval(trainer.global_step, trainer.epoch, &report)?;
            }
            if let Some(p) = &paths {
                report.write_csv(File::create(p.eval())?)?;
            }
            reached_target = c.target_fw.is_some_and(|t| report.fw >= t);
            summary.last_eval = Some(report);
        }
        if let Some(p) = &paths {
            summary.final_checkpoint = Some(save_checkpoint(&trainer, p)?);
        }
        if let Some(l) = &mut log {
            l.flush()?;
        }
        if reached_target {
            break;
        }
    }
    if let Some(l) = &mut log {
        l.flush()?;
    }
    summary.global_step = trainer.global_step;
    Ok((trainer, summary))
}
