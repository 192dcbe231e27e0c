//! Mix-up and SpecAugment-style time/frequency masking.
//!
//! Training applies masking first, then mix-up.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::config::{emit, Fields};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub mixup: bool,
    pub mixup_alpha: f64,
    /// Draw one λ per example instead of one per batch.
    pub per_example_lambda: bool,
    pub specaug: bool,
    pub time_masks: usize,
    pub freq_masks: usize,
    pub max_time_width: usize,
    pub max_freq_width: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mixup: false,
            mixup_alpha: 0.2,
            per_example_lambda: false,
            specaug: false,
            time_masks: 2,
            freq_masks: 2,
            max_time_width: 40,
            max_freq_width: 16,
        }
    }
}

impl AugmentConfig {
    pub fn emit(&self, out: &mut String) {
        emit(out, "augment.mixup", self.mixup);
        emit(out, "augment.mixup_alpha", self.mixup_alpha);
        emit(out, "augment.per_example_lambda", self.per_example_lambda);
        emit(out, "augment.specaug", self.specaug);
        emit(out, "augment.time_masks", self.time_masks);
        emit(out, "augment.freq_masks", self.freq_masks);
        emit(out, "augment.max_time_width", self.max_time_width);
        emit(out, "augment.max_freq_width", self.max_freq_width);
    }

    pub fn read(&mut self, f: &mut Fields) -> Result<()> {
        f.take("augment.mixup", &mut self.mixup)?;
        f.take("augment.mixup_alpha", &mut self.mixup_alpha)?;
        f.take("augment.per_example_lambda", &mut self.per_example_lambda)?;
        f.take("augment.specaug", &mut self.specaug)?;
        f.take("augment.time_masks", &mut self.time_masks)?;
        f.take("augment.freq_masks", &mut self.freq_masks)?;
        f.take("augment.max_time_width", &mut self.max_time_width)?;
        f.take("augment.max_freq_width", &mut self.max_freq_width)?;
        Ok(())
    }

    /// Checks the mask widths against a `(frames, bins)` input.
    pub fn validate(&self, frames: usize, bins: usize) -> Result<()> {
        if !(self.mixup_alpha > 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!("augment.mixup_alpha must be positive, got {}", self.mixup_alpha)));
        }
        if self.max_time_width > frames || self.max_freq_width > bins {
            return Err(Error::Config(format!(
                "mask widths ({} frames, {} bins) exceed the input ({frames} x {bins})",
                self.max_time_width, self.max_freq_width
            )));
        }
        Ok(())
    }
}

/// `λ ~ Beta(α, α)`.
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> f64 {
    Beta::new(alpha, alpha).expect("alpha validated positive").sample(rng)
}

/// What a mix-up call did, for logging and tests.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    /// One entry per example (all equal unless per-example λ).
    pub lambdas: Vec<f64>,
    pub partners: Vec<usize>,
}

impl MixPlan {
    pub fn sample(n: usize, alpha: f64, per_example: bool, rng: &mut impl Rng) -> Self {
        let lambdas = if per_example {
            (0..n).map(|_| sample_lambda(alpha, rng)).collect()
        } else {
            vec![sample_lambda(alpha, rng); n]
        };
        let mut partners: Vec<usize> = (0..n).collect();
        partners.shuffle(rng);
        MixPlan { lambdas, partners }
    }

    pub fn identity(n: usize) -> Self {
        MixPlan { lambdas: vec![1.0; n], partners: (0..n).collect() }
    }

    /// `x'_i = λ_i x_i + (1 - λ_i) x_{p(i)}`, and the same for `y`.
    pub fn apply(&self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        Ok((mix_rows(x, self)?, mix_rows(y, self)?))
    }
}

fn mix_rows(t: &Tensor<f32>, plan: &MixPlan) -> Result<Tensor<f32>> {
    let n = t.shape()[0];
    if plan.lambdas.len() != n || plan.partners.len() != n {
        return Err(Error::shape("mixup", format!("plan for {} examples, batch of {n}", plan.lambdas.len())));
    }
    let row = t.numel() / n;
    let d = t.data();
    let mut out = Vec::with_capacity(t.numel());
    for (i, (&lam, &j)) in plan.lambdas.iter().zip(&plan.partners).enumerate() {
        let (a, b) = (&d[i * row..(i + 1) * row], &d[j * row..(j + 1) * row]);
        out.extend(a.iter().zip(b).map(|(&u, &v)| (lam * u as f64 + (1.0 - lam) * v as f64) as f32));
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Mix-up of a batch `x (N, ...)` with soft labels `y (N, C)`. A batch of
/// one is returned unchanged.
pub fn mixup(
    x: &Tensor<f32>,
    y: &Tensor<f32>,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Tensor<f32>, MixPlan)> {
    let n = x.shape()[0];
    if y.rank() != 2 || y.shape()[0] != n {
        return Err(Error::shape("mixup", format!("x {:?} vs labels {:?}", x.shape(), y.shape())));
    }
    if n < 2 {
        log::warn!("mix-up needs at least two examples; batch of {n} passed through");
        return Ok((x.clone(), y.clone(), MixPlan::identity(n)));
    }
    let plan = MixPlan::sample(n, cfg.mixup_alpha, cfg.per_example_lambda, rng);
    let (xm, ym) = plan.apply(x, y)?;
    Ok((xm, ym, plan))
}

/// Half-open `[start, start + width)` bands along time and frequency.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Masks {
    pub time: Vec<(usize, usize)>,
    pub freq: Vec<(usize, usize)>,
}

fn band(extent: usize, max_width: usize, rng: &mut impl Rng) -> (usize, usize) {
    let w = rng.gen_range(0..=max_width.min(extent));
    (rng.gen_range(0..=extent - w), w)
}

impl Masks {
    /// Widths uniform in `0..=max`, starts uniform in `0..=extent-width`.
    pub fn sample(frames: usize, bins: usize, cfg: &AugmentConfig, rng: &mut impl Rng) -> Self {
        Masks {
            time: (0..cfg.time_masks).map(|_| band(frames, cfg.max_time_width, rng)).collect(),
            freq: (0..cfg.freq_masks).map(|_| band(bins, cfg.max_freq_width, rng)).collect(),
        }
    }

    /// Zeroes the masked cells of a row-major `(frames, bins)` slice.
    pub fn apply(&self, spec: &mut [f32], frames: usize, bins: usize) {
        debug_assert_eq!(spec.len(), frames * bins);
        for &(s, w) in &self.time {
            spec[s * bins..(s + w) * bins].fill(0.0);
        }
        for &(s, w) in &self.freq {
            for row in spec.chunks_mut(bins) {
                row[s..s + w].fill(0.0);
            }
        }
    }

    /// Cells covered by the union of all bands.
    pub fn covered_cells(&self, frames: usize, bins: usize) -> usize {
        let count = |bands: &[(usize, usize)], extent: usize| {
            let mut hit = vec![false; extent];
            for &(s, w) in bands {
                hit[s..s + w].fill(true);
            }
            hit.iter().filter(|&&h| h).count()
        };
        let (t, f) = (count(&self.time, frames), count(&self.freq, bins));
        t * bins + f * frames - t * f
    }
}

/// Masks every `(T, F)` map of `x`, which is `(T, F)` or `(N, 1, T, F)`,
/// with independent masks per example.
pub fn spec_augment(x: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Tensor<f32>, Vec<Masks>)> {
    let s = x.shape();
    let (n, frames, bins) = match s.len() {
        2 => (1, s[0], s[1]),
        4 if s[1] == 1 => (s[0], s[2], s[3]),
        _ => return Err(Error::shape("spec_augment", format!("expected (T, F) or (N, 1, T, F), got {s:?}"))),
    };
    cfg.validate(frames, bins)?;
    let mut out = x.clone();
    let mut all = Vec::with_capacity(n);
    for ex in out.data_mut().chunks_mut(frames * bins) {
        let m = Masks::sample(frames, bins, cfg, rng);
        m.apply(ex, frames, bins);
        all.push(m);
    }
    Ok((out, all))
}
