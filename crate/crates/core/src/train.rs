//! Balanced window sampling, SGD with momentum, plateau decay and early stopping.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DefaultGrid;
use crate::loss::{evaluate_plan, plan_logit_gradients, plan_loss, LossConfig};
use crate::network::{real, DetectorModel, Mode, Params, Real};
use crate::types::{extract_sample, window_events, Annotation, Record, Sample};

/// Consecutive rejected draws after which sampling gives up.
pub const MAX_REJECTIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub positive_fraction: f64,
    pub early_stop_patience: usize,
    pub plateau_patience: usize,
    pub lr_decay_factor: f64,
    /// Seconds.
    pub window_duration: f64,
    /// Defaults to `ceil(annotated training events / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 200,
            positive_fraction: 0.5,
            early_stop_patience: 10,
            plateau_patience: 5,
            lr_decay_factor: 0.5,
            window_duration: 20.0,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad("positive_fraction must lie in [0, 1]");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if !(self.window_duration > 0.0) {
            return bad("window_duration must be positive");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        Ok(())
    }
}

/// Records paired with their annotations.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub records: Vec<Record>,
    pub annotations: Vec<Annotation>,
}

impl LabeledSet {
    /// Pairs every record with the annotation of the same id; records
    /// without one get an empty annotation.
    pub fn new(records: Vec<Record>, annotations: &[Annotation]) -> Self {
        let annotations = records
            .iter()
            .map(|r| {
                annotations
                    .iter()
                    .find(|a| a.record_id == r.id)
                    .cloned()
                    .unwrap_or_else(|| Annotation::empty(r.id.clone()))
            })
            .collect();
        Self {
            records,
            annotations,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn event_count(&self) -> usize {
        self.annotations.iter().map(|a| a.events.len()).sum()
    }
}

fn window_width(record: &Record, window_duration: f64) -> usize {
    (window_duration * record.sample_rate).round() as usize
}

/// Draws a batch of windows: `round(positive_fraction · batch_size)` with at
/// least one visible event first, then windows with none.
pub fn sample_batch(
    set: &LabeledSet,
    window_duration: f64,
    batch_size: usize,
    positive_fraction: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    let eligible: Vec<usize> = (0..set.len())
        .filter(|&i| window_width(&set.records[i], window_duration) <= set.records[i].samples())
        .collect();
    if eligible.is_empty() {
        return Err(Error::SamplingExhausted(0));
    }
    let positives = (positive_fraction * batch_size as f64).round() as usize;
    let mut batch = Vec::with_capacity(batch_size);
    for k in 0..batch_size {
        let want_events = k < positives;
        let mut drawn = None;
        for _ in 0..MAX_REJECTIONS {
            let r = eligible[rng.random_range(0..eligible.len())];
            let record = &set.records[r];
            let width = window_width(record, window_duration);
            let first = rng.random_range(0..=record.samples() - width);
            let start = first as f64 / record.sample_rate;
            let sample = extract_sample(record, &set.annotations[r], start, window_duration)?;
            if sample.events.is_empty() != want_events {
                drawn = Some(sample);
                break;
            }
        }
        batch.push(drawn.ok_or(Error::SamplingExhausted(MAX_REJECTIONS))?);
    }
    Ok(batch)
}

/// Stacks samples into a `(batch, channels, samples)` tensor.
pub fn stack_samples<F: Real>(samples: &[Sample]) -> Array3<F> {
    let (c, t) = samples[0].data.dim();
    let mut out = Array3::<F>::zeros((samples.len(), c, t));
    for (mut dst, s) in out.outer_iter_mut().zip(samples) {
        dst.zip_mut_with(&s.data, |d, &v| *d = real(v as f64));
    }
    out
}

/// Momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<F> {
    pub velocity: Params<F>,
}

impl<F: Real> Sgd<F> {
    pub fn new(model: &DetectorModel<F>) -> Self {
        Self {
            velocity: Params::zeros(&model.config),
        }
    }

    pub fn step(
        &mut self,
        model: &mut DetectorModel<F>,
        grads: &Params<F>,
        lr: f64,
        momentum: f64,
    ) -> Result<()> {
        for (name, _, g) in grads.tensors() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name));
            }
        }
        let (lr, mu) = (real::<F>(lr), real::<F>(momentum));
        let params = model.params.tensors_mut();
        let velocity = self.velocity.tensors_mut();
        for ((p, v), (_, _, g)) in params.into_iter().zip(velocity).zip(grads.tensors()) {
            for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *p -= lr * *v;
            }
        }
        model.touch();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpochDecision {
    Improved,
    Continue,
    DecayLr,
    Stop,
}

/// Patience counters for plateau decay and early stopping.
#[derive(Debug, Clone)]
pub struct PlateauTracker {
    pub best: f64,
    pub best_epoch: usize,
    pub lr: f64,
    since_best: usize,
    since_decay: usize,
    plateau_patience: usize,
    early_stop_patience: usize,
    decay: f64,
}

impl PlateauTracker {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: 0,
            lr: cfg.lr,
            since_best: 0,
            since_decay: 0,
            plateau_patience: cfg.plateau_patience,
            early_stop_patience: cfg.early_stop_patience,
            decay: cfg.lr_decay_factor,
        }
    }

    /// Feeds the validation loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, loss: f64) -> EpochDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.since_best = 0;
            self.since_decay = 0;
            return EpochDecision::Improved;
        }
        self.since_best += 1;
        self.since_decay += 1;
        if self.since_best >= self.early_stop_patience {
            return EpochDecision::Stop;
        }
        if self.since_decay >= self.plateau_patience {
            self.since_decay = 0;
            self.lr *= self.decay;
            return EpochDecision::DecayLr;
        }
        EpochDecision::Continue
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loc: f64,
    pub train_cls: f64,
    pub val_loc: f64,
    pub val_cls: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn val_total(&self) -> f64 {
        self.val_loc + self.val_cls
    }

    pub fn train_total(&self) -> f64 {
        self.train_loc + self.train_cls
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,train_loc,train_cls,val_loc,val_cls,lr,seconds")?;
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                e.epoch, e.train_loc, e.train_cls, e.val_loc, e.val_cls, e.lr, e.seconds
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }
}

/// Non-overlapping full windows from `t = 0`, with their visible events.
pub fn validation_windows(set: &LabeledSet, window_duration: f64) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (record, ann) in set.records.iter().zip(&set.annotations) {
        let width = window_width(record, window_duration);
        let mut first = 0;
        while first + width <= record.samples() {
            let start = first as f64 / record.sample_rate;
            out.push(Sample {
                data: record.data.slice(s![.., first..first + width]).to_owned(),
                events: window_events(&ann.events, start, window_duration),
                window_start: start,
            });
            first += width;
        }
    }
    Ok(out)
}

/// Mean `(localisation, classification)` loss over `windows` with eval-mode batch norm.
pub fn validation_loss<F: Real>(
    model: &DetectorModel<F>,
    grid: &DefaultGrid,
    windows: &[Sample],
    loss_cfg: &LossConfig,
    chunk: usize,
) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(Error::InvalidConfig("no full validation window".into()));
    }
    let (mut loc, mut cls) = (0.0, 0.0);
    for part in windows.chunks(chunk.max(1)) {
        let out = model.infer(stack_samples::<F>(part).view())?;
        for (b, w) in part.iter().enumerate() {
            let o = out.sample(b);
            let l = evaluate_plan(&o, &plan_loss(&o, grid, &w.events, loss_cfg)?)?;
            loc += l.loc_loss;
            cls += l.cls_loss();
        }
    }
    let n = windows.len() as f64;
    Ok((loc / n, cls / n))
}

/// One gradient step on the summed loss of `batch`; returns the per-sample
/// mean `(loc, cls)` loss.
pub fn train_step<F: Real>(
    model: &mut DetectorModel<F>,
    sgd: &mut Sgd<F>,
    grid: &DefaultGrid,
    batch: &[Sample],
    loss_cfg: &LossConfig,
    lr: f64,
    momentum: f64,
) -> Result<(f64, f64)> {
    let input = stack_samples::<F>(batch);
    let (out, cache) = model.forward(input.view(), Mode::Train)?;
    let n = batch.len();
    let mut grad_loc = Array3::<F>::zeros(out.loc.dim());
    let mut grad_cls = Array3::<F>::zeros(out.probs.dim());
    let (mut loc, mut cls) = (0.0, 0.0);
    for (b, sample) in batch.iter().enumerate() {
        let o = out.sample(b);
        let plan = plan_loss(&o, grid, &sample.events, loss_cfg)?;
        let l = evaluate_plan(&o, &plan)?;
        loc += l.loc_loss;
        cls += l.cls_loss();
        let (gl, gc) = plan_logit_gradients(&o, &plan);
        grad_loc.index_axis_mut(Axis(0), b).assign(&gl);
        grad_cls.index_axis_mut(Axis(0), b).assign(&gc);
    }
    let grads = model.backward_logits(&cache, grad_loc.view(), grad_cls.view(), false)?;
    model.update_running_stats(&cache);
    sgd.step(model, &grads.params, lr, momentum)?;
    Ok((loc / n as f64, cls / n as f64))
}

fn check_windows(model_samples: usize, set: &LabeledSet, window_duration: f64) -> Result<()> {
    for r in &set.records {
        let w = window_width(r, window_duration);
        if w != model_samples {
            return Err(Error::InvalidConfig(format!(
                "record {} gives {w} samples per window, the network expects {model_samples}",
                r.id
            )));
        }
    }
    Ok(())
}

/// Trains `model` and returns the parameters of the epoch with the lowest
/// validation loss. `on_best` runs every time the validation loss improves.
pub fn train<F: Real>(
    mut model: DetectorModel<F>,
    train_set: &LabeledSet,
    validation: &LabeledSet,
    grid: &DefaultGrid,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    mut on_best: impl FnMut(usize, &DetectorModel<F>) -> Result<()>,
) -> Result<(DetectorModel<F>, TrainLog)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::InvalidConfig(
            "train and validation sets must be non-empty".into(),
        ));
    }
    if grid.len() != model.config.defaults {
        return Err(Error::InvalidConfig(format!(
            "grid has {} defaults, the network {}",
            grid.len(),
            model.config.defaults
        )));
    }
    check_windows(model.config.window_samples, train_set, cfg.window_duration)?;
    check_windows(model.config.window_samples, validation, cfg.window_duration)?;

    let steps = cfg
        .steps_per_epoch
        .unwrap_or_else(|| train_set.event_count().div_ceil(cfg.batch_size).max(1));
    let val_windows = validation_windows(validation, cfg.window_duration)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(&model);
    let mut tracker = PlateauTracker::new(cfg);
    let mut best = model.clone();
    let mut log = TrainLog::default();

    for epoch in 1..=cfg.max_epochs {
        let clock = Instant::now();
        let lr = tracker.lr;
        let (mut loc, mut cls) = (0.0, 0.0);
        for _ in 0..steps {
            let batch = sample_batch(
                train_set,
                cfg.window_duration,
                cfg.batch_size,
                cfg.positive_fraction,
                &mut rng,
            )?;
            let (l, c) = train_step(
                &mut model,
                &mut sgd,
                grid,
                &batch,
                loss_cfg,
                lr,
                cfg.momentum,
            )?;
            loc += l;
            cls += c;
        }
        let (val_loc, val_cls) =
            validation_loss(&model, grid, &val_windows, loss_cfg, cfg.batch_size)?;
        let entry = EpochLog {
            epoch,
            train_loc: loc / steps as f64,
            train_cls: cls / steps as f64,
            val_loc,
            val_cls,
            lr,
            seconds: clock.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} val {:.4} lr {lr:e}",
            entry.train_total(),
            entry.val_total()
        );
        log.epochs.push(entry);
        match tracker.observe(epoch, entry.val_total()) {
            EpochDecision::Improved => {
                best = model.clone();
                log.best_epoch = epoch;
                on_best(epoch, &best)?;
            }
            EpochDecision::Stop => break,
            EpochDecision::DecayLr | EpochDecision::Continue => {}
        }
    }
    Ok((best, log))
}
