//! SGD with momentum under a cosine warm-restart schedule, the training
//! loop, three-crop prediction and evaluation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{spec_augment, AugmentConfig, MixPlan};
use crate::autodiff::Tape;
use crate::config::{emit, Fields};
use crate::error::{Error, Result};
use crate::features::{fixed_crops, random_crop, NormStats};
use crate::layers::{cross_entropy_soft, softmax_tensor};
use crate::lcnn::{ForwardOptions, Lcnn};
use crate::metrics::{argmax, Metrics};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Cosine annealing with warm restarts. Cycle `i` lasts `t0 * t_mult^i`
/// epochs; within a cycle `lr = eta_min + (lr0 - eta_min)(1 + cos(pi t/T))/2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarmRestarts {
    pub lr0: f64,
    pub t0: f64,
    pub t_mult: f64,
    pub eta_min: f64,
}

impl Default for WarmRestarts {
    fn default() -> Self {
        WarmRestarts { lr0: 1e-3, t0: 10.0, t_mult: 2.0, eta_min: 1e-6 }
    }
}

impl WarmRestarts {
    /// Rate at position `t` of a cycle of length `period`. Exact at
    /// `t = 0`, `T/2` and `T`.
    pub fn lr_at(&self, t: f64, period: f64) -> f64 {
        let w = 0.5 * (1.0 + cospi(t / period));
        (1.0 - w) * self.eta_min + w * self.lr0
    }

    /// `(cycle index, position in cycle, cycle length)` for a global
    /// epoch position. Cycle boundaries belong to the new cycle.
    pub fn locate(&self, epoch: f64) -> (usize, f64, f64) {
        let (mut start, mut len, mut i) = (0.0, self.t0, 0);
        while epoch >= start + len {
            start += len;
            len *= self.t_mult;
            i += 1;
        }
        (i, epoch - start, len)
    }

    pub fn lr_at_epoch(&self, epoch: f64) -> f64 {
        let (_, t, len) = self.locate(epoch);
        self.lr_at(t, len)
    }

    /// Whether `epoch` (a count of completed epochs) ends a cycle.
    pub fn is_cycle_end(&self, epoch: usize) -> bool {
        epoch > 0 && self.locate(epoch as f64).1 == 0.0
    }
}

/// `cos(pi x)` for `x` in `[0, 1]`, reduced so that 0, 1/2 and 1 map to
/// exactly 1, 0 and -1.
fn cospi(x: f64) -> f64 {
    use std::f64::consts::PI;
    if x <= 0.25 {
        (PI * x).cos()
    } else if x < 0.75 {
        (PI * (0.5 - x)).sin()
    } else {
        -(PI * (1.0 - x)).cos()
    }
}

/// `v <- momentum v + g + wd p;  p <- p - lr v` over trainable entries.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Tensor<f32>>>,
    /// Steps skipped because a gradient was not finite.
    pub skipped: usize,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, velocity: Vec::new(), skipped: 0 }
    }

    /// Applies one step. Returns `false` (and changes nothing) if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>], lr: f64) -> Result<bool> {
        if grads.len() != store.len() {
            return Err(Error::contract("sgd_step", format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        for (e, g) in store.entries().iter().zip(grads) {
            if let Some(g) = g {
                if g.shape() != e.value.shape() {
                    return Err(Error::shape("sgd_step", format!("{}: grad {:?} vs {:?}", e.name, g.shape(), e.value.shape())));
                }
            }
        }
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient; step skipped ({} so far)", self.skipped);
            return Ok(false);
        }
        if self.velocity.len() != store.len() {
            self.velocity = vec![None; store.len()];
        }
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let p = store.get_mut(id);
            let v = v.get_or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = mu * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
        Ok(true)
    }
}

/// How the three crop outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Average {
    Probabilities,
    Logits,
}

impl fmt::Display for Average {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Average::Probabilities => "probabilities",
            Average::Logits => "logits",
        })
    }
}

impl FromStr for Average {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "probabilities" => Ok(Average::Probabilities),
            "logits" => Ok(Average::Logits),
            _ => Err(Error::Config(format!("average must be probabilities|logits, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: WarmRestarts,
    pub augment: AugmentConfig,
    pub average: Average,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            batch_size: 24,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: WarmRestarts::default(),
            augment: AugmentConfig::default(),
            average: Average::Probabilities,
        }
    }
}

impl TrainConfig {
    pub fn emit(&self, out: &mut String) {
        emit(out, "train.epochs", self.epochs);
        emit(out, "train.batch_size", self.batch_size);
        emit(out, "train.lr0", self.schedule.lr0);
        emit(out, "train.momentum", self.momentum);
        emit(out, "train.weight_decay", self.weight_decay);
        emit(out, "train.t0", self.schedule.t0);
        emit(out, "train.t_mult", self.schedule.t_mult);
        emit(out, "train.eta_min", self.schedule.eta_min);
        emit(out, "train.average", self.average);
        self.augment.emit(out);
    }

    pub fn read(&mut self, f: &mut Fields) -> Result<()> {
        f.take("train.epochs", &mut self.epochs)?;
        f.take("train.batch_size", &mut self.batch_size)?;
        f.take("train.lr0", &mut self.schedule.lr0)?;
        f.take("train.momentum", &mut self.momentum)?;
        f.take("train.weight_decay", &mut self.weight_decay)?;
        f.take("train.t0", &mut self.schedule.t0)?;
        f.take("train.t_mult", &mut self.schedule.t_mult)?;
        f.take("train.eta_min", &mut self.schedule.eta_min)?;
        f.take("train.average", &mut self.average)?;
        self.augment.read(f)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        let checks = [
            (s.lr0 > 0.0 && s.lr0.is_finite(), "train.lr0 must be positive"),
            (self.batch_size >= 2, "train.batch_size must be at least 2 (mix-up needs pairs)"),
            ((0.0..1.0).contains(&self.momentum), "train.momentum must be in [0, 1)"),
            (self.weight_decay >= 0.0, "train.weight_decay must be non-negative"),
            (s.t0 > 0.0 && s.t_mult >= 1.0, "train.t0 must be positive and train.t_mult at least 1"),
            ((0.0..=s.lr0).contains(&s.eta_min), "train.eta_min must be in [0, lr0]"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::Config((*msg).to_owned())),
            None => Ok(()),
        }
    }
}

/// A clip's raw log-mel spectrogram `(T, bins)` and its class.
#[derive(Clone, Debug)]
pub struct Example {
    pub spec: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Rate at the start of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// Online accuracy over the epoch's training batches (hard labels).
    pub train_acc: f64,
    /// Three-crop accuracy on the validation set; `NaN` without one.
    pub val_acc: f64,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch\tlr\ttrain_loss\ttrain_acc\tval_acc";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6e}\t{:.6}\t{:.4}\t{:.4}",
            self.epoch, self.lr, self.train_loss, self.train_acc, self.val_acc
        )
    }
}

pub enum Control {
    Continue,
    Stop,
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor<f32>> {
    let mut t = Tensor::zeros(vec![labels.len(), classes]);
    for (i, &k) in labels.iter().enumerate() {
        if k >= classes {
            return Err(Error::Data(format!("label {k} out of range for {classes} classes")));
        }
        t.data_mut()[i * classes + k] = 1.0;
    }
    Ok(t)
}

fn stack(crops: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let (t, f) = (crops[0].shape()[0], crops[0].shape()[1]);
    let mut data = Vec::with_capacity(crops.len() * t * f);
    for c in crops {
        data.extend_from_slice(c.data());
    }
    Tensor::new(vec![crops.len(), 1, t, f], data)
}

/// Everything a training run mutates besides the model.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub sgd: Sgd,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// The data stream (shuffles, crops, augmentation) is seeded from
    /// `seed` on a stream separate from model initialization.
    pub fn new(cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
        Ok(Trainer { cfg, sgd, rng, epoch: 0 })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over `train` (specs already normalized).
    pub fn run_epoch(&mut self, model: &mut Lcnn<f32>, train: &[Example]) -> Result<(f64, f64)> {
        if train.is_empty() {
            return Err(Error::Data("empty training set".into()));
        }
        let frames = model.config().input_frames;
        let classes = model.config().num_classes;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let batches: Vec<&[usize]> = order.chunks(self.cfg.batch_size).collect();
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let lr = self.cfg.schedule.lr_at_epoch(self.epoch as f64 + b as f64 / batches.len() as f64);
            let crops: Vec<Tensor<f32>> = idx.iter().map(|&i| random_crop(&train[i].spec, frames, &mut self.rng)).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            let mut x = stack(&crops)?;
            let mut y = one_hot(&labels, classes)?;
            let aug = &self.cfg.augment;
            if aug.specaug {
                x = spec_augment(&x, aug, &mut self.rng)?.0;
            }
            if aug.mixup && idx.len() >= 2 {
                let plan = MixPlan::sample(idx.len(), aug.mixup_alpha, aug.per_example_lambda, &mut self.rng);
                (x, y) = plan.apply(&x, &y)?;
            }
            let tape = Tape::new();
            let p = model.store().bind(&tape);
            let out = model.forward(&p, tape.constant(x), ForwardOptions::train())?;
            let loss = cross_entropy_soft(out.logits, &y)?;
            let lv = loss.value().item() as f64;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("training loss {lv} at epoch {}, batch {b}", self.epoch + 1)));
            }
            let logits = out.logits.value();
            for (row, &t) in logits.data().chunks(classes).zip(&labels) {
                correct += (argmax(row) == t) as usize;
            }
            loss_sum += lv * idx.len() as f64;
            let stats = out.batch_stats;
            let grads = p.gradients(&tape.backward(loss)?);
            drop(p);
            drop(tape);
            if self.sgd.step(model.store_mut(), &grads, lr)? {
                model.update_running_stats(&stats)?;
            }
        }
        self.epoch += 1;
        Ok((loss_sum / train.len() as f64, correct as f64 / train.len() as f64))
    }
}

/// Fits input statistics on `train`, stores them in the model, and returns
/// normalized copies of `train`.
pub fn prepare(model: &mut Lcnn<f32>, train: &[Example]) -> Result<Vec<Example>> {
    let specs: Vec<&Tensor<f32>> = train.iter().map(|e| &e.spec).collect();
    let stats = NormStats::fit(&specs)?;
    let bins = stats.mean.len();
    model.set_input_stats(Tensor::new(vec![bins], stats.mean.clone())?, Tensor::new(vec![bins], stats.std.clone())?)?;
    train
        .iter()
        .map(|e| Ok(Example { spec: stats.apply(&e.spec)?, label: e.label }))
        .collect()
}

/// Trains for `cfg.epochs` epochs (or until `on_epoch` says stop). `train`
/// and `val` hold raw log-mel specs.
pub fn train(
    model: &mut Lcnn<f32>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog, &Lcnn<f32>) -> Result<Control>,
) -> Result<Vec<EpochLog>> {
    let normalized = prepare(model, train)?;
    let mut trainer = Trainer::new(cfg.clone(), seed)?;
    let mut logs = Vec::new();
    for epoch in 1..=cfg.epochs {
        let lr = cfg.schedule.lr_at_epoch((epoch - 1) as f64);
        let (train_loss, train_acc) = trainer.run_epoch(model, &normalized)?;
        let val_acc = if val.is_empty() { f64::NAN } else { evaluate(model, val, cfg.average)?.accuracy() };
        let log = EpochLog { epoch, lr, train_loss, train_acc, val_acc };
        let control = on_epoch(&log, model)?;
        logs.push(log);
        if matches!(control, Control::Stop) {
            break;
        }
    }
    Ok(logs)
}

/// Applies the model's stored input statistics to a raw spec.
pub fn normalize_input(model: &Lcnn<f32>, spec: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (mean, std) = model.input_stats();
    let stats = NormStats { mean: mean.data().to_vec(), std: std.data().to_vec() };
    stats.apply(spec)
}

/// Class probabilities for a raw log-mel spec: the mean of the softmax
/// outputs of three separate single-crop passes (or the softmax of the mean
/// logits with [`Average::Logits`]).
pub fn predict(model: &Lcnn<f32>, spec: &Tensor<f32>, average: Average) -> Result<Vec<f32>> {
    let bins = model.config().input_bins;
    if spec.rank() != 2 || spec.shape()[1] != bins {
        return Err(Error::shape("predict", format!("spec {:?} must be (T, {bins})", spec.shape())));
    }
    let norm = normalize_input(model, spec)?;
    let frames = model.config().input_frames;
    let outs: Vec<Tensor<f32>> = fixed_crops(&norm, frames)
        .iter()
        .map(|c| {
            let x = c.reshape(vec![1, 1, frames, bins])?;
            match average {
                Average::Probabilities => model.probabilities(&x),
                Average::Logits => model.logits(&x),
            }
        })
        .collect::<Result<_>>()?;
    let mean: Vec<f32> = (0..outs[0].numel())
        .map(|k| (outs[0].data()[k] + outs[1].data()[k] + outs[2].data()[k]) / 3.0)
        .collect();
    match average {
        Average::Probabilities => Ok(mean),
        Average::Logits => Ok(softmax_tensor(&Tensor::new(vec![1, mean.len()], mean)?)?.into_data()),
    }
}

/// Three-crop predictions over `data`, tallied into a confusion matrix.
pub fn evaluate(model: &Lcnn<f32>, data: &[Example], average: Average) -> Result<Metrics> {
    let mut m = Metrics::new(model.config().num_classes);
    for e in data {
        let p = predict(model, &e.spec, average)?;
        m.record(e.label, argmax(&p));
    }
    Ok(m)
}
