//! Adversarial and discriminator-only training loops, the validation
//! metric C and the generator diagnostics.
//!
//! Each epoch shuffles the training split and walks it in batches. For the
//! probabilistic variants a batch is one discriminator step on the real
//! batch (soft-label targets) plus an equally sized synthetic batch
//! (target 0), then one generator step on fresh noise (target 1). The
//! Wasserstein variant takes a critic step on every batch, clips the critic
//! after each one and takes a generator step after every `n_critic` critic
//! steps, counted across batch and epoch boundaries.

mod metrics;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use metrics::{
    fidelity_metrics, format_runs, format_window, mean_std, metric_c, mode_collapse_score,
    summarize_c_trace, summarize_c_window, CSummary, FidelityReport, Spread, C_WINDOW,
};

use crate::data::{Class, Item, LabeledDataset};
use crate::engine::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::losses::{bce_loss, gan_discriminator_loss, gan_generator_loss, wasserstein_losses};
use crate::models::{sample_noise, Model, ModelSpec, Variant, VariantChoice};
use crate::nn::{ForwardCtx, Mode, Network, ParamStore};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::{run_stream, Rng, Stream};

pub const DEFAULT_BATCH: usize = 16;
pub const DEFAULT_N_CRITIC: usize = 5;
pub const DEFAULT_PATIENCE: usize = 100;
pub const DEFAULT_GAN_EPOCHS: usize = 1000;
pub const DEFAULT_DISC_EPOCHS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Critic steps per generator step, Wasserstein variant only.
    pub n_critic: usize,
    /// Epochs without a better validation C before a discriminator-only
    /// run stops. Adversarial runs always use the full budget.
    pub patience: Option<usize>,
    /// Validation C is computed every this many epochs.
    pub eval_every: usize,
    pub seed: u64,
    pub g_opt: Option<OptimizerKind>,
    pub d_opt: Option<OptimizerKind>,
    /// Use the real batch's soft labels, rather than 1, as the generator's
    /// targets.
    pub generator_soft_labels: bool,
    /// Wall-clock budget in seconds, checked after every epoch.
    pub time_limit: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: DEFAULT_GAN_EPOCHS,
            batch_size: DEFAULT_BATCH,
            n_critic: DEFAULT_N_CRITIC,
            patience: Some(DEFAULT_PATIENCE),
            eval_every: 1,
            seed: 0,
            g_opt: None,
            d_opt: None,
            generator_soft_labels: false,
            time_limit: None,
        }
    }
}

impl TrainConfig {
    /// Defaults with the epoch budget suited to `choice`.
    pub fn for_choice(choice: VariantChoice) -> Self {
        TrainConfig {
            epochs: if choice.disc_only {
                DEFAULT_DISC_EPOCHS
            } else {
                DEFAULT_GAN_EPOCHS
            },
            ..Self::default()
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.n_critic == 0 || self.eval_every == 0 {
            return Err(Error::invalid(
                "epochs, batch size, critic steps and eval cadence must all be positive",
            ));
        }
        if self.time_limit.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::invalid("time limit must be positive"));
        }
        if self.patience == Some(0) {
            return Err(Error::invalid("patience must be positive"));
        }
        let bn = model.discriminator.has_batch_norm()
            || model
                .generator
                .as_ref()
                .is_some_and(Network::has_batch_norm);
        if bn && self.batch_size < 2 {
            return Err(Error::invalid("batch norm needs batches of at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    /// Mean discriminator or critic loss over the epoch's steps.
    pub d_loss: f64,
    /// Mean cross-entropy on the real batches alone.
    pub d_real_loss: Option<f64>,
    /// Mean generator loss; unset when no generator step fell in the epoch.
    pub g_loss: Option<f64>,
    /// Validation C, when evaluated.
    pub c: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub class: Class,
    pub label: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub variant: String,
    pub seq_len: usize,
    pub dims: usize,
    pub seed: u64,
    pub run: u64,
    pub epochs_requested: usize,
    pub epochs_run: usize,
    pub batch_size: usize,
    pub batches_per_epoch: usize,
    pub n_critic: Option<usize>,
    pub clip: Option<f64>,
    pub g_optimizer: Option<OptimizerKind>,
    pub d_optimizer: OptimizerKind,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Largest critic weight magnitude seen right after any critic step.
    pub critic_max_abs: Option<f64>,
    pub history: Vec<EpochRecord>,
    /// Minimum and windowed average over the evaluated C values.
    pub c_summary: Option<CSummary>,
    /// One-based epoch of the minimum C.
    pub min_epoch: Option<usize>,
    /// One-based epoch whose parameters were restored at the end.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Set when the wall-clock budget ended the run before its epoch budget.
    pub time_limited: bool,
    /// The C this run contributes to a results table: the windowed average
    /// for adversarial runs, the restored best for discriminator-only runs.
    pub reported_c: Option<f64>,
    pub formatted_c: Option<String>,
    /// Final validation predictions.
    pub predictions: Vec<Prediction>,
    pub fidelity_initial: Option<FidelityReport>,
    pub fidelity: Option<FidelityReport>,
    pub wall_time_s: f64,
}

impl TrainingReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// `epoch,d_loss,g_loss,C` with empty cells for missing values.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        w.write_record(["epoch", "d_loss", "g_loss", "C"])
            .map_err(|e| csv_error(path, e))?;
        for r in &self.history {
            w.write_record([
                r.epoch.to_string(),
                r.d_loss.to_string(),
                opt(r.g_loss),
                opt(r.c),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other:?}", path.display())),
    }
}

/// Outcome of repeated runs of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub runs: usize,
    pub c_values: Vec<f64>,
    pub mean_c: Option<f64>,
    /// Sample standard deviation across runs.
    pub std_c: Option<f64>,
    pub formatted: Option<String>,
    pub reports: Vec<TrainingReport>,
}

/// Tracks the best validation C and decides when to stop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    pub patience: Option<usize>,
    pub best: Option<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Waiting,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        EarlyStopping {
            patience,
            best: None,
        }
    }

    /// Records `c` at `epoch`; only a strictly smaller C counts as progress.
    pub fn update(&mut self, epoch: usize, c: f64) -> Verdict {
        match self.best {
            Some((_, best)) if c >= best => {
                let (best_epoch, _) = self.best.expect("checked above");
                match self.patience {
                    Some(p) if epoch - best_epoch >= p => Verdict::Stop,
                    _ => Verdict::Waiting,
                }
            }
            _ => {
                self.best = Some((epoch, c));
                Verdict::Improved
            }
        }
    }
}

/// Splits `order` into batches of `size`; a trailing single sample joins
/// the previous batch so batch statistics never see a lone sample.
pub fn make_batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("more than one batch").extend(last);
    }
    out
}

struct Streams {
    shuffle: Rng,
    noise: Rng,
    dropout: Rng,
}

impl Streams {
    fn new(seed: u64, run: u64) -> Self {
        Streams {
            shuffle: run_stream(seed, run, Stream::Shuffle),
            noise: run_stream(seed, run, Stream::Noise),
            dropout: run_stream(seed, run, Stream::Dropout),
        }
    }
}

fn train_ctx(rng: &mut Rng, update_stats: bool) -> ForwardCtx<'_> {
    ForwardCtx {
        mode: Mode::Train,
        rng: Some(rng),
        update_stats,
    }
}

/// Synthetic batch for a discriminator step: train-mode generator, running
/// statistics untouched, no gradient tracking.
fn fake_batch(gen: &mut Network, spec: &ModelSpec, n: usize, s: &mut Streams) -> Result<Tensor> {
    let z = sample_noise(spec, n, &mut s.noise)?;
    let mut g = Graph::new();
    let b = gen.bind(&mut g, false)?;
    let zv = g.constant(z)?;
    let y = gen.forward(&mut g, &b, zv, &mut train_ctx(&mut s.dropout, false))?;
    Ok(g.value(y)?.clone())
}

struct StepLoss {
    total: f64,
    real: Option<f64>,
}

/// One optimizer step on the discriminator. Without `fake` this is the
/// supervised step of a discriminator-only model.
fn discriminator_step(
    d: &mut Network,
    opt: &mut OptimizerState,
    real: Tensor,
    targets: &[f64],
    fake: Option<Tensor>,
    wasserstein: bool,
    dropout: &mut Rng,
) -> Result<StepLoss> {
    let mut g = Graph::new();
    let b = d.bind(&mut g, true)?;
    let xr = g.constant(real)?;
    let mut ctx = train_ctx(dropout, true);
    let yr = d.forward(&mut g, &b, xr, &mut ctx)?;
    let (loss, real_loss) = match fake {
        None => {
            let l = bce_loss(&mut g, yr, targets)?;
            (l, Some(l))
        }
        Some(f) => {
            let xf = g.constant(f)?;
            let yf = d.forward(&mut g, &b, xf, &mut ctx)?;
            if wasserstein {
                (wasserstein_losses(&mut g, yr, yf)?.0, None)
            } else {
                let real_only = bce_loss(&mut g, yr, targets)?;
                (
                    gan_discriminator_loss(&mut g, yr, targets, yf)?,
                    Some(real_only),
                )
            }
        }
    };
    g.backward(loss)?;
    d.params_mut().zero_grad();
    d.collect_grads(&g, &b)?;
    opt.apply(d.params_mut())?;
    Ok(StepLoss {
        total: g.value(loss)?.item()?,
        real: real_loss
            .map(|v| g.value(v).and_then(Tensor::item))
            .transpose()?,
    })
}

/// One optimizer step on the generator through a frozen discriminator.
fn generator_step(
    gen: &mut Network,
    d: &mut Network,
    opt: &mut OptimizerState,
    spec: &ModelSpec,
    n: usize,
    targets: Option<&[f64]>,
    s: &mut Streams,
) -> Result<f64> {
    let z = sample_noise(spec, n, &mut s.noise)?;
    let mut g = Graph::new();
    let gb = gen.bind(&mut g, true)?;
    let db = d.bind(&mut g, false)?;
    let zv = g.constant(z)?;
    let x = gen.forward(&mut g, &gb, zv, &mut train_ctx(&mut s.dropout, true))?;
    let y = d.forward(&mut g, &db, x, &mut train_ctx(&mut s.dropout, false))?;
    let loss = if spec.variant == Variant::Wgan {
        // only the synthetic half of the critic objective depends on G
        let m = g.mean(y)?;
        g.scale(m, -1.0)?
    } else {
        gan_generator_loss(&mut g, y, targets)?
    };
    g.backward(loss)?;
    gen.params_mut().zero_grad();
    gen.collect_grads(&g, &gb)?;
    opt.apply(gen.params_mut())?;
    g.value(loss)?.item()
}

fn max_abs_trainable(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter(|p| p.trainable)
        .flat_map(|p| p.tensor.data().iter())
        .fold(0.0, |m, v| m.max(v.abs()))
}

struct Validation {
    x: Tensor,
    labels: Vec<f64>,
    items: Vec<Item>,
}

impl Validation {
    fn new(data: &LabeledDataset) -> Result<Option<Self>> {
        let items = data.validation();
        if items.is_empty() {
            return Ok(None);
        }
        Ok(Some(Validation {
            x: LabeledDataset::batch(&items)?,
            labels: LabeledDataset::labels(&items),
            items: items.into_iter().cloned().collect(),
        }))
    }

    fn c(&self, d: &mut Network) -> Result<(f64, Vec<f64>)> {
        let p = d.predict(&self.x)?.into_data();
        Ok((metric_c(&p, &self.labels)?, p))
    }

    fn predictions(&self, p: &[f64]) -> Vec<Prediction> {
        self.items
            .iter()
            .zip(p)
            .map(|(i, &predicted)| Prediction {
                id: i.id.clone(),
                class: i.class,
                label: i.label,
                predicted,
            })
            .collect()
    }
}

fn check_dataset(spec: &ModelSpec, data: &LabeledDataset) -> Result<()> {
    if (spec.seq_len, spec.dims) != (data.meta.seq_len, data.meta.dims) {
        return Err(Error::ShapeMismatch {
            op: "model vs dataset",
            left: vec![spec.seq_len, spec.dims],
            right: vec![data.meta.seq_len, data.meta.dims],
        });
    }
    if data.train().is_empty() {
        return Err(Error::InsufficientSamples("training split is empty".into()));
    }
    Ok(())
}

fn with_overrides(spec: &ModelSpec, cfg: &TrainConfig) -> ModelSpec {
    ModelSpec {
        g_opt: cfg.g_opt.unwrap_or(spec.g_opt),
        d_opt: cfg.d_opt.unwrap_or(spec.d_opt),
        ..spec.clone()
    }
}

/// Generator fidelity against the training split on fixed evaluation
/// noise.
fn fidelity(model: &mut Model, real: &Tensor, z: &Tensor) -> Result<FidelityReport> {
    let generated = model.generate(z)?;
    fidelity_metrics(real, &generated)
}

fn blank_report(spec: &ModelSpec, cfg: &TrainConfig, run: u64, batches: usize) -> TrainingReport {
    let wasserstein = spec.variant == Variant::Wgan;
    TrainingReport {
        variant: spec.choice().to_string(),
        seq_len: spec.seq_len,
        dims: spec.dims,
        seed: cfg.seed,
        run,
        epochs_requested: cfg.epochs,
        epochs_run: 0,
        batch_size: cfg.batch_size,
        batches_per_epoch: batches,
        n_critic: wasserstein.then_some(cfg.n_critic),
        clip: spec.clip,
        g_optimizer: (!spec.disc_only).then_some(spec.g_opt),
        d_optimizer: spec.d_opt,
        d_steps: 0,
        g_steps: 0,
        critic_max_abs: None,
        history: Vec::new(),
        c_summary: None,
        min_epoch: None,
        best_epoch: None,
        stopped_early: false,
        time_limited: false,
        reported_c: None,
        formatted_c: None,
        predictions: Vec::new(),
        fidelity_initial: None,
        fidelity: None,
        wall_time_s: 0.0,
    }
}

fn out_of_time(cfg: &TrainConfig, started: Instant) -> bool {
    cfg.time_limit
        .is_some_and(|t| started.elapsed().as_secs_f64() >= t)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn at(epoch: usize, batch: usize) -> impl FnOnce(Error) -> Error {
    move |e| match e {
        e @ Error::Training { .. } => e,
        e => Error::Training {
            epoch,
            batch,
            source: Box::new(e),
        },
    }
}

/// Summary of the evaluated C values, with the window counted in
/// evaluations of `eval_every` epochs each.
fn summarize_history(
    history: &[EpochRecord],
    eval_every: usize,
) -> Result<Option<(CSummary, usize)>> {
    let evaluated: Vec<(usize, f64)> = history
        .iter()
        .filter_map(|r| r.c.map(|c| (r.epoch, c)))
        .collect();
    if evaluated.is_empty() {
        return Ok(None);
    }
    let trace: Vec<f64> = evaluated.iter().map(|e| e.1).collect();
    let s = summarize_c_window(&trace, C_WINDOW.div_ceil(eval_every))?;
    Ok(Some((s, evaluated[s.min_index].0)))
}

/// Trains one model from scratch; `run` selects independent random streams
/// for repeated runs under one seed.
pub fn train(
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    run: u64,
) -> Result<(Model, TrainingReport)> {
    if spec.disc_only {
        train_discriminator_only(spec, data, cfg, run)
    } else {
        train_adversarial(spec, data, cfg, run)
    }
}

pub fn train_adversarial(
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    run: u64,
) -> Result<(Model, TrainingReport)> {
    if spec.disc_only {
        return Err(Error::invalid("adversarial training needs a generator"));
    }
    check_dataset(spec, data)?;
    let spec = with_overrides(spec, cfg);
    let mut model = Model::build(&spec, &mut run_stream(cfg.seed, run, Stream::Init))?;
    cfg.validate(&model)?;
    let started = Instant::now();
    let wasserstein = spec.variant == Variant::Wgan;
    let probabilistic = spec.variant.probabilistic();

    let train_items = data.train();
    let real_all = LabeledDataset::batch(&train_items)?;
    let validation = if probabilistic {
        Validation::new(data)?
    } else {
        None
    };
    let eval_z = sample_noise(
        &spec,
        train_items.len(),
        &mut run_stream(cfg.seed, run, Stream::Sample),
    )?;

    let mut s = Streams::new(cfg.seed, run);
    let mut d_opt = OptimizerState::new(spec.d_opt, spec.clip);
    let mut g_opt = OptimizerState::new(spec.g_opt, None);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut report = blank_report(&spec, cfg, run, make_batches(&order, cfg.batch_size).len());
    report.fidelity_initial = Some(fidelity(&mut model, &real_all, &eval_z)?);
    let mut critic_since_g = 0usize;
    let mut critic_max: Option<f64> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut s.shuffle);
        let (mut d_losses, mut d_real, mut g_losses) = (Vec::new(), Vec::new(), Vec::new());
        for (bi, batch) in make_batches(&order, cfg.batch_size).iter().enumerate() {
            let mut step = |model: &mut Model, s: &mut Streams| -> Result<()> {
                let items: Vec<&Item> = batch.iter().map(|&i| train_items[i]).collect();
                let real = LabeledDataset::batch(&items)?;
                let targets = LabeledDataset::labels(&items);
                let Model {
                    generator,
                    discriminator,
                    ..
                } = model;
                let gen = generator
                    .as_mut()
                    .expect("adversarial model has a generator");
                let fake = fake_batch(gen, &spec, items.len(), s)?;
                let l = discriminator_step(
                    discriminator,
                    &mut d_opt,
                    real,
                    &targets,
                    Some(fake),
                    wasserstein,
                    &mut s.dropout,
                )?;
                d_losses.push(l.total);
                d_real.extend(l.real);
                report.d_steps += 1;
                if wasserstein {
                    let m = max_abs_trainable(discriminator.params());
                    critic_max = Some(critic_max.map_or(m, |c| c.max(m)));
                    critic_since_g += 1;
                    if critic_since_g < cfg.n_critic {
                        return Ok(());
                    }
                    critic_since_g = 0;
                }
                let g_targets = cfg.generator_soft_labels.then_some(targets.as_slice());
                g_losses.push(generator_step(
                    gen,
                    discriminator,
                    &mut g_opt,
                    &spec,
                    items.len(),
                    g_targets,
                    s,
                )?);
                report.g_steps += 1;
                Ok(())
            };
            step(&mut model, &mut s).map_err(at(epoch, bi + 1))?;
        }
        let mut c = None;
        if let Some(v) = validation.as_ref().filter(|_| epoch % cfg.eval_every == 0) {
            c = Some(v.c(&mut model.discriminator).map_err(at(epoch, 0))?.0);
        }
        report.history.push(EpochRecord {
            epoch,
            d_loss: mean(&d_losses).expect("every epoch has a batch"),
            d_real_loss: mean(&d_real),
            g_loss: mean(&g_losses),
            c,
        });
        log::debug!(
            "epoch {epoch}: d {:.4} c {c:?}",
            report.history.last().expect("pushed").d_loss
        );
        report.epochs_run = epoch;
        if out_of_time(cfg, started) && epoch < cfg.epochs {
            report.time_limited = true;
            break;
        }
    }

    report.critic_max_abs = critic_max;
    if let Some(v) = &validation {
        let (_, p) = v.c(&mut model.discriminator)?;
        report.predictions = v.predictions(&p);
    }
    if let Some((summary, epoch)) = summarize_history(&report.history, cfg.eval_every)? {
        report.min_epoch = Some(epoch);
        report.reported_c = Some(summary.avg_c);
        report.formatted_c = Some(format_window(summary.avg_c, summary.min_c));
        report.c_summary = Some(summary);
    }
    report.fidelity = Some(fidelity(&mut model, &real_all, &eval_z)?);
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Supervised training of the discriminator alone on the soft labels of
/// both classes, with early stopping on validation C and the best
/// parameters restored at the end.
pub fn train_discriminator_only(
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    run: u64,
) -> Result<(Model, TrainingReport)> {
    if !spec.variant.probabilistic() {
        return Err(Error::invalid(
            "discriminator-only training needs probability outputs",
        ));
    }
    check_dataset(spec, data)?;
    let spec = ModelSpec {
        disc_only: true,
        ..with_overrides(spec, cfg)
    };
    let mut model = Model::build(&spec, &mut run_stream(cfg.seed, run, Stream::Init))?;
    cfg.validate(&model)?;
    let started = Instant::now();
    let validation = Validation::new(data)?.ok_or_else(|| {
        Error::InsufficientSamples("discriminator-only training needs a validation split".into())
    })?;
    let train_items = data.train();
    let mut s = Streams::new(cfg.seed, run);
    let mut opt = OptimizerState::new(spec.d_opt, spec.clip);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut report = blank_report(&spec, cfg, run, make_batches(&order, cfg.batch_size).len());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best: Option<(ParamStore, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut s.shuffle);
        let mut losses = Vec::new();
        for (bi, batch) in make_batches(&order, cfg.batch_size).iter().enumerate() {
            let items: Vec<&Item> = batch.iter().map(|&i| train_items[i]).collect();
            let mut step = || -> Result<StepLoss> {
                let x = LabeledDataset::batch(&items)?;
                let targets = LabeledDataset::labels(&items);
                discriminator_step(
                    &mut model.discriminator,
                    &mut opt,
                    x,
                    &targets,
                    None,
                    false,
                    &mut s.dropout,
                )
            };
            losses.push(step().map_err(at(epoch, bi + 1))?.total);
            report.d_steps += 1;
        }
        report.epochs_run = epoch;
        let mut record = EpochRecord {
            epoch,
            d_loss: mean(&losses).expect("every epoch has a batch"),
            d_real_loss: mean(&losses),
            g_loss: None,
            c: None,
        };
        let mut verdict = Verdict::Waiting;
        if epoch % cfg.eval_every == 0 {
            let (c, p) = validation
                .c(&mut model.discriminator)
                .map_err(at(epoch, 0))?;
            record.c = Some(c);
            verdict = stopper.update(epoch, c);
            if verdict == Verdict::Improved {
                best = Some((model.discriminator.params().clone(), p));
            }
        }
        report.history.push(record);
        if verdict == Verdict::Stop {
            report.stopped_early = true;
            break;
        }
        if out_of_time(cfg, started) && epoch < cfg.epochs {
            report.time_limited = true;
            break;
        }
    }

    let (best_epoch, best_c) = stopper.best.ok_or_else(|| {
        Error::invalid("no validation C was computed: eval cadence exceeds the epoch budget")
    })?;
    let (params, p) = best.expect("a best C comes with its parameters");
    *model.discriminator.params_mut() = params;
    report.best_epoch = Some(best_epoch);
    report.predictions = validation.predictions(&p);
    if let Some((summary, epoch)) = summarize_history(&report.history, cfg.eval_every)? {
        report.min_epoch = Some(epoch);
        report.c_summary = Some(summary);
    }
    report.reported_c = Some(best_c);
    report.formatted_c = Some(format!("{best_c:.3}"));
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Independent runs `0..runs` in parallel, with mean and sample standard
/// deviation of their reported C.
pub fn train_runs(
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    runs: usize,
) -> Result<(Vec<Model>, RunSummary)> {
    if runs == 0 {
        return Err(Error::invalid("runs must be at least 1"));
    }
    let results = (0..runs as u64)
        .into_par_iter()
        .map(|r| train(spec, data, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    let (models, reports): (Vec<Model>, Vec<TrainingReport>) = results.into_iter().unzip();
    let c_values: Vec<f64> = reports.iter().filter_map(|r| r.reported_c).collect();
    let (mean_c, std_c) = if c_values.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&c_values);
        (Some(m), Some(s))
    };
    let formatted = if runs == 1 {
        reports[0].formatted_c.clone()
    } else {
        mean_c.zip(std_c).map(|(m, s)| format_runs(m, s))
    };
    Ok((
        models,
        RunSummary {
            variant: spec.choice().to_string(),
            runs,
            c_values,
            mean_c,
            std_c,
            formatted,
            reports,
        },
    ))
}
