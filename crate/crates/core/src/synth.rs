//! Synthetic ten-class scene corpus.
//!
//! Class `k` is amplitude-modulated band-limited noise: a Gaussian-shaped
//! band around a class centre frequency, modulated at a class rate. Both are
//! jittered per clip, as are modulation phase and level, so that no two
//! clips are identical while the classes stay separable.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::dataset::{Split, DEFAULT_LABELS};
use crate::error::{Error, Result};
use crate::features::write_wav_16;

pub const SAMPLE_RATE: u32 = 44100;
pub const DURATION_S: f64 = 10.0;

/// The per-class generator parameters before jitter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Recipe {
    pub centre_hz: f64,
    /// Band standard deviation as a fraction of the centre.
    pub relative_width: f64,
    pub am_rate_hz: f64,
    pub am_depth: f64,
}

/// Centres are log-spaced from 150 Hz to 12 kHz; modulation rates rise
/// from 0.5 Hz in steps of 0.75 Hz.
pub fn recipe(class: usize) -> Recipe {
    let x = class as f64 / 9.0;
    Recipe {
        centre_hz: 150.0 * (12000.0f64 / 150.0).powf(x),
        relative_width: 0.08,
        am_rate_hz: 0.5 + 0.75 * class as f64,
        am_depth: 0.8,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
    pub duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { train_per_class: 10, test_per_class: 0, seed: 0, duration_s: DURATION_S }
    }
}

/// One clip of class `class`, deterministic in `rng`.
pub fn clip(class: usize, samples: usize, rng: &mut impl Rng) -> Vec<f32> {
    let r = recipe(class);
    let centre = r.centre_hz * (1.0 + rng.gen_range(-0.03..0.03));
    let rate = r.am_rate_hz * (1.0 + rng.gen_range(-0.1..0.1));
    let phase = rng.gen_range(0.0..2.0 * PI);
    let gain = 10f64.powf(rng.gen_range(-3.0..3.0) / 20.0);

    let mut spectrum: Vec<Complex<f64>> =
        (0..samples).map(|_| Complex::new(StandardNormal.sample(rng), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(samples).process(&mut spectrum);
    let sigma = centre * r.relative_width;
    let fs = SAMPLE_RATE as f64;
    for (i, c) in spectrum.iter_mut().enumerate() {
        let f = i.min(samples - i) as f64 * fs / samples as f64;
        let z = (f - centre) / sigma;
        *c *= (-0.5 * z * z).exp();
    }
    planner.plan_fft_inverse(samples).process(&mut spectrum);

    let mut out: Vec<f64> = spectrum
        .iter()
        .enumerate()
        .map(|(n, c)| {
            let t = n as f64 / fs;
            c.re * (1.0 + r.am_depth * (2.0 * PI * rate * t + phase).sin())
        })
        .collect();
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let scale = 0.25 * gain / peak;
    // a faint broadband floor keeps every mel band above the log floor
    for v in &mut out {
        let n: f64 = StandardNormal.sample(rng);
        *v = *v * scale + 1e-4 * n;
    }
    out.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect()
}

pub const METADATA_HEADER: &str = "filename\tscene_label\tsplit";

/// Writes `audio/<label>-<split>-<nnn>.wav` files and `metadata.tsv`
/// under `out_dir`. Returns the metadata path.
pub fn generate(out_dir: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    if cfg.duration_s <= 0.0 {
        return Err(Error::Config("synth duration must be positive".into()));
    }
    let audio = out_dir.join("audio");
    std::fs::create_dir_all(&audio)?;
    let samples = (cfg.duration_s * SAMPLE_RATE as f64).round() as usize;
    let mut meta = String::from(METADATA_HEADER);
    meta.push('\n');
    for (class, label) in DEFAULT_LABELS.iter().enumerate() {
        for (split, n) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
            for i in 0..n {
                // each clip has its own stream so files do not depend on the counts
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                rng.set_stream(((class as u64) << 40) | ((split as u64) << 32) | i as u64);
                let name = format!("audio/{label}-{split}-{i:03}.wav");
                write_wav_16(&out_dir.join(&name), &clip(class, samples, &mut rng), SAMPLE_RATE)?;
                meta.push_str(&format!("{name}\t{label}\t{split}\n"));
            }
        }
    }
    let path = out_dir.join("metadata.tsv");
    std::fs::write(&path, meta)?;
    Ok(path)
}
