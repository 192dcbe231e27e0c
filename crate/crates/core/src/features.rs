//! WAV decoding and log-mel features: Hann-windowed STFT, Slaney mel
//! filterbank, `ln(x + 1e-10)`, per-bin standardization, and the crop
//! policies used for training and inference.
//!
//! A spectrogram is a `Tensor<f32>` of shape `(T, bins)`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::config::{emit, Fields};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const LOG_EPS: f64 = 1e-10;
pub const STD_FLOOR: f32 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Reads PCM (8/16/24/32-bit) or IEEE float WAV, scales to `[-1, 1]` and
/// downmixes multichannel audio by averaging.
pub fn load_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f32> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.into_samples::<f32>().collect::<Result<_, _>>().map_err(|e| wav_error(path, e))?
        }
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(|e| wav_error(path, e))?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    let samples = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|f| (f.iter().map(|&v| v as f64).sum::<f64>() / channels as f64) as f32)
            .collect()
    };
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{}: non-finite sample", path.display())));
    }
    Ok(AudioClip { samples, sample_rate: spec.sample_rate })
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::format(0, format!("{}: {other}", path.display())),
    }
}

/// Writes mono 16-bit PCM, clipping to `[-1, 1)`.
pub fn write_wav_16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win_samples: usize,
    pub hop_samples: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 44_100,
            n_fft: 2048,
            win_samples: 1764,
            hop_samples: 882,
            n_mels: 128,
            fmin: 0.0,
            fmax: 22_050.0,
        }
    }
}

impl FeatureConfig {
    pub fn emit(&self, out: &mut String) {
        emit(out, "features.sample_rate", self.sample_rate);
        emit(out, "features.n_fft", self.n_fft);
        emit(out, "features.win_samples", self.win_samples);
        emit(out, "features.hop_samples", self.hop_samples);
        emit(out, "features.n_mels", self.n_mels);
        emit(out, "features.fmin", self.fmin);
        emit(out, "features.fmax", self.fmax);
    }

    pub fn read(&mut self, f: &mut Fields) -> Result<()> {
        f.take("features.sample_rate", &mut self.sample_rate)?;
        f.take("features.n_fft", &mut self.n_fft)?;
        f.take("features.win_samples", &mut self.win_samples)?;
        f.take("features.hop_samples", &mut self.hop_samples)?;
        f.take("features.n_mels", &mut self.n_mels)?;
        f.take("features.fmin", &mut self.fmin)?;
        f.take("features.fmax", &mut self.fmax)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.win_samples == 0 || self.win_samples > self.n_fft || self.hop_samples == 0 {
            return Err(Error::Config(format!(
                "need 0 < features.win_samples ({}) <= features.n_fft ({}) and features.hop_samples > 0",
                self.win_samples, self.n_fft
            )));
        }
        if self.n_mels == 0 || !(0.0 <= self.fmin && self.fmin < self.fmax) || self.fmax > self.sample_rate as f64 / 2.0 {
            return Err(Error::Config(format!(
                "need n_mels > 0 and 0 <= fmin < fmax <= sample_rate/2, got {} mels, {}..{} Hz",
                self.n_mels, self.fmin, self.fmax
            )));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `floor((N - win) / hop) + 1`, or `None` if shorter than one window.
    pub fn frame_count(&self, n_samples: usize) -> Option<usize> {
        (n_samples >= self.win_samples).then(|| (n_samples - self.win_samples) / self.hop_samples + 1)
    }
}

/// Periodic Hann window `0.5 - 0.5 cos(2 pi n / N)`.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Power spectrogram `(T, n_fft/2 + 1)`. Frames are not centered; each is
/// windowed and zero-padded to `n_fft`.
pub struct Stft {
    cfg: FeatureConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &FeatureConfig) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Stft { cfg: cfg.clone(), window: hann(cfg.win_samples), fft }
    }

    pub fn power(&self, samples: &[f32]) -> Result<Tensor<f32>> {
        let c = &self.cfg;
        let frames = c.frame_count(samples.len()).ok_or_else(|| {
            Error::contract(
                "stft_power",
                format!("{} samples is shorter than one {}-sample window", samples.len(), c.win_samples),
            )
        })?;
        let bins = c.n_bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..frames {
            let frame = &samples[t * c.hop_samples..t * c.hop_samples + c.win_samples];
            for (i, z) in buf.iter_mut().enumerate() {
                *z = Complex::new(frame.get(i).map_or(0.0, |&s| s as f64 * self.window[i]), 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            out.extend(buf[..bins].iter().map(|z| z.norm_sqr() as f32));
        }
        Tensor::new(vec![frames, bins], out)
    }
}

pub fn stft_power(samples: &[f32], cfg: &FeatureConfig) -> Result<Tensor<f32>> {
    Stft::new(cfg).power(samples)
}

const F_SP: f64 = 200.0 / 3.0;
const MIN_LOG_HZ: f64 = 1000.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / F_SP;

fn log_step() -> f64 {
    6.4f64.ln() / 27.0
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    if hz < MIN_LOG_HZ {
        hz / F_SP
    } else {
        MIN_LOG_MEL + (hz / MIN_LOG_HZ).ln() / log_step()
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        MIN_LOG_HZ * ((mel - MIN_LOG_MEL) * log_step()).exp()
    }
}

/// Triangular filters `(n_mels, n_fft/2 + 1)` with edges equally spaced in
/// mel, each scaled to unit area in Hz (`2 / (f_hi - f_lo)` peak).
pub fn mel_filterbank(cfg: &FeatureConfig) -> Tensor<f32> {
    let bins = cfg.n_bins();
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let bin_hz = cfg.sample_rate as f64 / cfg.n_fft as f64;
    let mut w = vec![0f32; cfg.n_mels * bins];
    for m in 0..cfg.n_mels {
        let (f0, f1, f2) = (edges[m], edges[m + 1], edges[m + 2]);
        let norm = 2.0 / (f2 - f0);
        for k in 0..bins {
            let f = k as f64 * bin_hz;
            let rise = (f - f0) / (f1 - f0);
            let fall = (f2 - f) / (f2 - f1);
            w[m * bins + k] = (rise.min(fall).max(0.0) * norm) as f32;
        }
    }
    Tensor::new(vec![cfg.n_mels, bins], w).expect("positive extents")
}

/// `power (T, bins) x filterbankᵀ -> (T, n_mels)`.
pub fn mel_project(power: &Tensor<f32>, filterbank: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (t, bins) = (power.shape()[0], power.shape()[1]);
    let mels = filterbank.shape()[0];
    if filterbank.shape()[1] != bins {
        return Err(Error::shape(
            "mel_project",
            format!("power has {bins} bins, filterbank expects {}", filterbank.shape()[1]),
        ));
    }
    let mut out = vec![0f32; t * mels];
    f32::gemm(t, bins, mels, 1.0, power.data(), false, filterbank.data(), true, 0.0, &mut out);
    Tensor::new(vec![t, mels], out)
}

pub fn log_compress(mel: &Tensor<f32>) -> Tensor<f32> {
    mel.map(|v| (v as f64 + LOG_EPS).ln() as f32)
}

/// Reusable extractor: decoded samples to log-mel `(T, n_mels)`.
pub struct Extractor {
    cfg: FeatureConfig,
    stft: Stft,
    filterbank: Tensor<f32>,
}

impl Extractor {
    pub fn new(cfg: &FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Extractor { cfg: cfg.clone(), stft: Stft::new(cfg), filterbank: mel_filterbank(cfg) })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn log_mel(&self, clip: &AudioClip) -> Result<Tensor<f32>> {
        if clip.sample_rate != self.cfg.sample_rate {
            return Err(Error::Data(format!(
                "sample rate {} Hz, expected {} Hz (resampling is not supported)",
                clip.sample_rate, self.cfg.sample_rate
            )));
        }
        let power = self.stft.power(&clip.samples)?;
        Ok(log_compress(&mel_project(&power, &self.filterbank)?))
    }

    pub fn from_file(&self, path: &Path) -> Result<Tensor<f32>> {
        self.log_mel(&load_wav(path)?)
    }
}

/// Per-bin mean and standard deviation of the training features.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Two-pass mean / population std over every frame of every spec, in
    /// f64. A bin with std below `1e-6` is clamped to `1e-6`.
    pub fn fit(specs: &[&Tensor<f32>]) -> Result<Self> {
        let first = specs.first().ok_or_else(|| Error::Data("cannot fit normalization on zero specs".into()))?;
        let bins = first.shape()[1];
        let mut sum = vec![0f64; bins];
        let mut count = 0usize;
        for s in specs {
            if s.shape()[1] != bins {
                return Err(Error::shape("fit_stats", format!("{} bins vs {bins}", s.shape()[1])));
            }
            for row in s.data().chunks(bins) {
                for (a, &v) in sum.iter_mut().zip(row) {
                    *a += v as f64;
                }
            }
            count += s.shape()[0];
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0f64; bins];
        for s in specs {
            for row in s.data().chunks(bins) {
                for ((a, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *a += (v as f64 - m).powi(2);
                }
            }
        }
        let std: Vec<f32> = sq
            .iter()
            .enumerate()
            .map(|(b, s)| {
                let sd = (s / count as f64).sqrt() as f32;
                if sd < STD_FLOOR {
                    log::warn!("feature bin {b} has std {sd:e}; clamped to {STD_FLOOR:e}");
                    STD_FLOOR
                } else {
                    sd
                }
            })
            .collect();
        Ok(NormStats { mean: mean.iter().map(|&m| m as f32).collect(), std })
    }

    pub fn identity(bins: usize) -> Self {
        NormStats { mean: vec![0.0; bins], std: vec![1.0; bins] }
    }

    pub fn apply(&self, spec: &Tensor<f32>) -> Result<Tensor<f32>> {
        let bins = spec.shape()[1];
        if bins != self.mean.len() {
            return Err(Error::shape("normalize", format!("spec has {bins} bins, stats {}", self.mean.len())));
        }
        let mut out = spec.clone();
        for row in out.data_mut().chunks_mut(bins) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }
}

/// `frames` consecutive rows starting at `start`; rows past the end repeat
/// the last frame.
pub fn crop_at(spec: &Tensor<f32>, start: usize, frames: usize) -> Tensor<f32> {
    let (t, bins) = (spec.shape()[0], spec.shape()[1]);
    let d = spec.data();
    let mut out = Vec::with_capacity(frames * bins);
    for i in 0..frames {
        let r = (start + i).min(t - 1);
        out.extend_from_slice(&d[r * bins..(r + 1) * bins]);
    }
    Tensor::new(vec![frames, bins], out).expect("positive extents")
}

/// Uniform start in `[0, T - frames]`. Shorter specs are edge-padded.
pub fn random_crop(spec: &Tensor<f32>, frames: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let t = spec.shape()[0];
    let start = if t > frames { rng.gen_range(0..=t - frames) } else { 0 };
    crop_at(spec, start, frames)
}

/// Starts of the three evaluation windows: `0`, `floor((T - l) / 2)`,
/// `T - l`; all zero (one padded crop) when `T <= l`.
pub fn fixed_crop_starts(t: usize, frames: usize) -> [usize; 3] {
    if t <= frames {
        return [0; 3];
    }
    [0, (t - frames) / 2, t - frames]
}

pub fn fixed_crops(spec: &Tensor<f32>, frames: usize) -> [Tensor<f32>; 3] {
    fixed_crop_starts(spec.shape()[0], frames).map(|s| crop_at(spec, s, frames))
}

const CACHE_MAGIC: &[u8; 4] = b"MSP1";

/// Feature cache encoding: `"MSP1"`, u32 T, u32 F, then T*F f32, all
/// little-endian.
pub fn encode_spec(spec: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * spec.numel());
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&(spec.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(spec.shape()[1] as u32).to_le_bytes());
    for v in spec.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_spec(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 12 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"MSP1\"", &bytes[..4])));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if t == 0 || f == 0 {
        return Err(Error::format(4, format!("empty spectrogram {t}x{f}")));
    }
    let body = &bytes[12..];
    if body.len() != 4 * t * f {
        return Err(Error::format(
            12 + body.len().min(4 * t * f) as u64,
            format!("{t}x{f} needs {} data bytes, found {}", 4 * t * f, body.len()),
        ));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(vec![t, f], data)
}

pub fn write_cache(path: &Path, spec: &Tensor<f32>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_spec(spec))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Tensor<f32>> {
    decode_spec(&fs::read(path)?)
}
