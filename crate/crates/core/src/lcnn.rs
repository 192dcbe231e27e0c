//! The light CNN: five MFM blocks with optional SE / CBAM gates, a
//! flatten, and a two-layer head.
//!
//! Layer order per block (pooling ceil mode throughout):
//!
//! ```text
//! conv1 7x3 -> mfm -> pool
//! conv2a 1x1 -> mfm -> bn2a -> conv2 3x3 -> mfm -> attn2 -> pool -> bn2
//! conv3a 1x1 -> mfm -> bn3a -> conv3 3x3 -> mfm -> attn3 -> pool
//! conv4a 1x1 -> mfm -> bn4a -> conv4 3x3 -> mfm -> attn4 -> bn4
//! conv5a 1x1 -> mfm -> bn5a -> conv5 3x3 -> mfm -> attn5 -> pool
//! flatten -> fc1 -> mfm -> fc2
//! ```

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Cbam, SqueezeExcitation, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL};
use crate::autodiff::{Tape, Var};
use crate::config::{emit, Fields};
use crate::error::{Error, Result};
use crate::layers::{maxpool2d, mfm, pool_out_extent, softmax_tensor, BatchNorm2d, BatchStats, Conv2d, ConvGeometry, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Attention {
    None,
    Se,
    Cbam,
    SeCbam,
}

impl Attention {
    pub fn uses_se(self) -> bool {
        matches!(self, Attention::Se | Attention::SeCbam)
    }

    pub fn uses_cbam(self) -> bool {
        matches!(self, Attention::Cbam | Attention::SeCbam)
    }
}

impl fmt::Display for Attention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Attention::None => "none",
            Attention::Se => "se",
            Attention::Cbam => "cbam",
            Attention::SeCbam => "se+cbam",
        })
    }
}

impl FromStr for Attention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "-" => Ok(Attention::None),
            "se" => Ok(Attention::Se),
            "cbam" => Ok(Attention::Cbam),
            "se+cbam" => Ok(Attention::SeCbam),
            _ => Err(Error::Config(format!("attention must be none|se|cbam|se+cbam, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LcnnConfig {
    /// Crop length `l` in frames.
    pub input_frames: usize,
    pub input_bins: usize,
    /// Output channels of conv1, conv2, conv3, conv4, conv5 (before MFM).
    pub channels: [usize; 5],
    pub attention: Attention,
    pub num_classes: usize,
    /// Width of the MFM after fc1; fc1 itself is twice as wide.
    pub embedding_dim: usize,
    pub reduction: usize,
    pub spatial_kernel: usize,
}

impl Default for LcnnConfig {
    fn default() -> Self {
        LcnnConfig {
            input_frames: 250,
            input_bins: 128,
            channels: [64, 96, 128, 64, 64],
            attention: Attention::Cbam,
            num_classes: 10,
            embedding_dim: 80,
            reduction: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
        }
    }
}

fn parse_channels(s: &str) -> Result<[usize; 5]> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| Error::Config(format!("{p:?}: {e}"))))
        .collect::<Result<_>>()?;
    parts.try_into().map_err(|v: Vec<usize>| Error::Config(format!("expected 5 channel counts, got {}", v.len())))
}

impl LcnnConfig {
    pub fn emit(&self, out: &mut String) {
        emit(out, "model.frames", self.input_frames);
        emit(out, "model.bins", self.input_bins);
        let ch: Vec<String> = self.channels.iter().map(|c| c.to_string()).collect();
        emit(out, "model.channels", ch.join(","));
        emit(out, "model.attention", self.attention);
        emit(out, "model.classes", self.num_classes);
        emit(out, "model.embedding", self.embedding_dim);
        emit(out, "model.reduction", self.reduction);
        emit(out, "model.spatial_kernel", self.spatial_kernel);
    }

    pub fn read(&mut self, f: &mut Fields) -> Result<()> {
        f.take("model.frames", &mut self.input_frames)?;
        f.take("model.bins", &mut self.input_bins)?;
        f.take_with("model.channels", &mut self.channels, parse_channels)?;
        f.take("model.attention", &mut self.attention)?;
        f.take("model.classes", &mut self.num_classes)?;
        f.take("model.embedding", &mut self.embedding_dim)?;
        f.take("model.reduction", &mut self.reduction)?;
        f.take("model.spatial_kernel", &mut self.spatial_kernel)?;
        Ok(())
    }

    /// Canonical text, as stored in model files.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        self.emit(&mut s);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = Fields::parse(text)?;
        let mut cfg = LcnnConfig::default();
        cfg.read(&mut fields)?;
        fields.finish()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_frames < 16 {
            return Err(Error::Config(format!(
                "model.frames = {} but four pooling halvings need at least 16",
                self.input_frames
            )));
        }
        if self.input_bins < 3 {
            return Err(Error::Config(format!("model.bins = {} is smaller than the 3-bin conv1 kernel", self.input_bins)));
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return Err(Error::Config(format!("channel count {c} must be even and positive (MFM halves it)")));
        }
        if self.embedding_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("model.embedding and model.classes must be positive".into()));
        }
        if self.attention != Attention::None {
            for c in self.block_outputs()[1..].iter() {
                if self.reduction == 0 || c % self.reduction != 0 {
                    return Err(Error::Config(format!(
                        "attention width {c} not divisible by model.reduction {}",
                        self.reduction
                    )));
                }
            }
            if self.attention.uses_cbam() && self.spatial_kernel % 2 == 0 {
                return Err(Error::Config(format!("model.spatial_kernel {} must be odd", self.spatial_kernel)));
            }
        }
        Ok(())
    }

    /// Channel count after each block's final MFM.
    pub fn block_outputs(&self) -> [usize; 5] {
        self.channels.map(|c| c / 2)
    }

    /// `(T, F)` of the final pooled map.
    pub fn final_extents(&self) -> (usize, usize) {
        // conv1: time padded to keep l, frequency unpadded with a 3-bin kernel
        let mut t = self.input_frames;
        let mut f = self.input_bins - 2;
        for _ in 0..4 {
            t = pool_out_extent(t, 2, 2, true).expect("validated extent");
            f = pool_out_extent(f, 2, 2, true).expect("validated extent");
        }
        (t, f)
    }

    pub fn flatten_dim(&self) -> usize {
        let (t, f) = self.final_extents();
        self.block_outputs()[4] * t * f
    }
}

#[derive(Clone, Debug)]
struct Gate {
    se: Option<SqueezeExcitation>,
    cbam: Option<Cbam>,
}

impl Gate {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        cfg: &LcnnConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let se = if cfg.attention.uses_se() {
            Some(SqueezeExcitation::new(store, &format!("{name}.se"), channels, cfg.reduction, rng)?)
        } else {
            None
        };
        let cbam = if cfg.attention.uses_cbam() {
            Some(Cbam::new(store, &format!("{name}.cbam"), channels, cfg.reduction, cfg.spatial_kernel, rng)?)
        } else {
            None
        };
        Ok(Gate { se, cbam })
    }

    fn forward<'t, T: Real>(&self, p: &Bound<'t, T>, mut x: Var<'t, T>) -> Result<Var<'t, T>> {
        if let Some(se) = &self.se {
            x = se.forward(p, x)?;
        }
        if let Some(cbam) = &self.cbam {
            x = cbam.forward(p, x)?;
        }
        Ok(x)
    }
}

/// A block's 1x1 expansion, its 3x3 convolution and the norms around them.
#[derive(Clone, Debug)]
struct Block {
    expand: Conv2d,
    expand_bn: usize,
    conv: Conv2d,
    gate: Gate,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Batch statistics for batch norm (and running-stat updates).
    pub training: bool,
    /// Skip every attention gate, i.e. gates fixed at 1.
    pub bypass_attention: bool,
}

impl ForwardOptions {
    pub fn train() -> Self {
        ForwardOptions { training: true, bypass_attention: false }
    }

    pub fn eval() -> Self {
        ForwardOptions::default()
    }
}

pub struct ForwardOutput<'t, T: Real> {
    pub logits: Var<'t, T>,
    /// Output of the MFM after fc1.
    pub embedding: Var<'t, T>,
    /// Channel count after each block's final MFM.
    pub trace: Vec<usize>,
    /// One entry per batch-norm layer in model order; empty in eval mode.
    pub batch_stats: Vec<BatchStats<T>>,
}

#[derive(Clone, Debug)]
pub struct Lcnn<T: Real = f32> {
    config: LcnnConfig,
    store: ParamStore<T>,
    input_mean: ParamId,
    input_std: ParamId,
    conv1: Conv2d,
    blocks: [Block; 4],
    /// bn2a, bn2, bn3a, bn4a, bn4, bn5a.
    norms: Vec<BatchNorm2d>,
    fc1: Linear,
    fc2: Linear,
}

const SQUARE: ConvGeometry = ConvGeometry { stride: (1, 1), padding: (1, 1) };
const POINT: ConvGeometry = ConvGeometry { stride: (1, 1), padding: (0, 0) };

impl<T: Real> Lcnn<T> {
    /// Builds a freshly initialized model; parameters depend only on
    /// `(config, seed)`.
    pub fn build(config: LcnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bins = config.input_bins;
        let input_mean = store.buffer("input.mean", Tensor::zeros(vec![bins]));
        let input_std = store.buffer("input.std", Tensor::ones(vec![bins]));
        let [c1, c2, c3, c4, c5] = config.channels;
        let outs = config.block_outputs();
        let conv1 = Conv2d::new(
            &mut store,
            "conv1",
            1,
            c1,
            (7, 3),
            ConvGeometry { stride: (1, 1), padding: (3, 0) },
            &mut rng,
        );
        let mut norms = Vec::new();
        let mut blocks = Vec::new();
        for (i, (&cin, &cout)) in [outs[0], outs[1], outs[2], outs[3]].iter().zip(&[c2, c3, c4, c5]).enumerate() {
            let n = i + 2;
            let expand = Conv2d::new(&mut store, &format!("conv{n}a"), cin, 2 * cin, (1, 1), POINT, &mut rng);
            norms.push(BatchNorm2d::new(&mut store, &format!("bn{n}a"), cin));
            let expand_bn = norms.len() - 1;
            let conv = Conv2d::new(&mut store, &format!("conv{n}"), cin, cout, (3, 3), SQUARE, &mut rng);
            let gate = Gate::new(&mut store, &format!("attn{n}"), cout / 2, &config, &mut rng)?;
            if n == 2 || n == 4 {
                norms.push(BatchNorm2d::new(&mut store, &format!("bn{n}"), cout / 2));
            }
            blocks.push(Block { expand, expand_bn, conv, gate });
        }
        let fc1 = Linear::new(&mut store, "fc1", config.flatten_dim(), 2 * config.embedding_dim, &mut rng);
        let fc2 = Linear::new(&mut store, "fc2", config.embedding_dim, config.num_classes, &mut rng);
        let blocks: [Block; 4] = blocks.try_into().expect("four blocks");
        Ok(Lcnn { config, store, input_mean, input_std, conv1, blocks, norms, fc1, fc2 })
    }

    pub fn config(&self) -> &LcnnConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Trainable scalars, including attention and batch-norm affine terms.
    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    /// Per-bin input standardization stored with the model.
    pub fn input_stats(&self) -> (&Tensor<T>, &Tensor<T>) {
        (self.store.get(self.input_mean), self.store.get(self.input_std))
    }

    pub fn set_input_stats(&mut self, mean: Tensor<T>, std: Tensor<T>) -> Result<()> {
        let bins = self.config.input_bins;
        if mean.shape() != [bins] || std.shape() != [bins] {
            return Err(Error::shape(
                "set_input_stats",
                format!("expected ({bins},), got {:?} and {:?}", mean.shape(), std.shape()),
            ));
        }
        *self.store.get_mut(self.input_mean) = mean;
        *self.store.get_mut(self.input_std) = std;
        Ok(())
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != c.input_frames || shape[3] != c.input_bins {
            return Err(Error::contract(
                "lcnn",
                format!("input {shape:?} must be (N, 1, {}, {})", c.input_frames, c.input_bins),
            ));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>, opts: ForwardOptions) -> Result<ForwardOutput<'t, T>> {
        self.check_input(&x.shape())?;
        let mut stats = Vec::new();
        let mut trace = Vec::new();
        let norm = |i: usize, x: Var<'t, T>, stats: &mut Vec<BatchStats<T>>| -> Result<Var<'t, T>> {
            let (y, s) = self.norms[i].forward(p, &self.store, x, opts.training)?;
            stats.extend(s);
            Ok(y)
        };
        let pool = |x: Var<'t, T>| maxpool2d(x, (2, 2), (2, 2), true);

        let mut h = mfm(self.conv1.forward(p, x)?)?;
        trace.push(h.shape()[1]);
        h = pool(h)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = mfm(block.expand.forward(p, h)?)?;
            h = norm(block.expand_bn, h, &mut stats)?;
            let bn = block.expand_bn + 1;
            h = mfm(block.conv.forward(p, h)?)?;
            trace.push(h.shape()[1]);
            if !opts.bypass_attention {
                h = block.gate.forward(p, h)?;
            }
            // block index 0..4 maps to blocks 2..5
            match i {
                0 => {
                    h = pool(h)?;
                    h = norm(bn, h, &mut stats)?;
                }
                1 | 3 => h = pool(h)?,
                _ => h = norm(bn, h, &mut stats)?,
            }
        }
        let n = h.shape()[0];
        let flat = h.reshape(&[n, self.config.flatten_dim()])?;
        let embedding = mfm(self.fc1.forward(p, flat)?)?;
        let logits = self.fc2.forward(p, embedding)?;
        Ok(ForwardOutput { logits, embedding, trace, batch_stats: stats })
    }

    /// Folds the batch statistics of a training forward pass into the
    /// running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>]) -> Result<()> {
        if stats.len() != self.norms.len() {
            return Err(Error::contract(
                "update_running_stats",
                format!("{} stat sets for {} batch-norm layers", stats.len(), self.norms.len()),
            ));
        }
        for (bn, s) in self.norms.iter().zip(stats) {
            bn.update_running(&mut self.store, s);
        }
        Ok(())
    }

    fn infer<R>(&self, x: &Tensor<T>, opts: ForwardOptions, pick: impl FnOnce(&ForwardOutput<'_, T>) -> R) -> Result<R> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let out = self.forward(&p, tape.constant(x.clone()), opts)?;
        Ok(pick(&out))
    }

    /// Inference-mode logits `(N, classes)`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(x, ForwardOptions::eval(), |o| o.logits.value().as_ref().clone())
    }

    /// Inference-mode class probabilities.
    pub fn probabilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        softmax_tensor(&self.logits(x)?)
    }

    /// Inference-mode embeddings `(N, embedding_dim)`.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(x, ForwardOptions::eval(), |o| o.embedding.value().as_ref().clone())
    }

    /// Channel count after each block's final MFM, from an actual pass.
    pub fn channel_trace(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        self.infer(x, ForwardOptions::eval(), |o| o.trace.clone())
    }

    /// Logits with every attention gate bypassed.
    pub fn logits_without_attention(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let opts = ForwardOptions { training: false, bypass_attention: true };
        self.infer(x, opts, |o| o.logits.value().as_ref().clone())
    }
}

const MAGIC: &[u8; 4] = b"LCN1";
pub const FORMAT_VERSION: u32 = 1;

impl Lcnn<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for e in self.store.entries() {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.value.rank() as u8);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::format(0, format!("bad magic {magic:?}, expected \"LCN1\"")));
        }
        let at = r.pos;
        let version = r.u32("format version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(at as u64, format!("unsupported format version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let text = std::str::from_utf8(r.take(len, "config text")?)
            .map_err(|e| Error::format(at as u64, format!("config text is not UTF-8: {e}")))?;
        let config = LcnnConfig::from_text(text).map_err(|e| Error::format(at as u64, e.to_string()))?;
        let mut model = Lcnn::build(config, 0).map_err(|e| Error::format(at as u64, e.to_string()))?;
        for i in 0..model.store.len() {
            let at = r.pos;
            let len = r.u32("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "parameter name")?)
                .map_err(|e| Error::format(at as u64, format!("parameter name is not UTF-8: {e}")))?;
            let expected = &model.store.entries()[i];
            if name != expected.name {
                return Err(Error::format(at as u64, format!("parameter {name:?} where {:?} was expected", expected.name)));
            }
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            if shape != expected.value.shape() {
                return Err(Error::format(
                    at as u64,
                    format!("{name} has shape {shape:?}, config implies {:?}", expected.value.shape()),
                ));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(4 * n, "parameter data")?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let id = model.store.find(name).expect("name checked");
            model.store.get_mut(id).data_mut().copy_from_slice(&data);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(model)
    }

    /// Writes to a sibling temporary file and renames it into place, so a
    /// reader never sees a partial model.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small(attention: Attention) -> LcnnConfig {
        LcnnConfig { input_frames: 16, input_bins: 12, channels: [8, 8, 8, 8, 8], attention, embedding_dim: 6, num_classes: 3, ..LcnnConfig::default() }
    }

    fn input(cfg: &LcnnConfig, n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(vec![n, 1, cfg.input_frames, cfg.input_bins], &mut rng)
    }

    #[test]
    fn default_extents() {
        let cfg = LcnnConfig::default();
        assert_eq!(cfg.final_extents(), (16, 8));
        assert_eq!(cfg.flatten_dim(), 4096);
    }

    #[test]
    fn frames_lower_bound() {
        let mut cfg = small(Attention::None);
        assert!(Lcnn::<f32>::build(cfg.clone(), 0).is_ok());
        cfg.input_frames = 15;
        let e = Lcnn::<f32>::build(cfg, 0).unwrap_err();
        assert!(matches!(&e, Error::Config(m) if m.contains("16")), "{e}");
    }

    #[test]
    fn odd_channels_rejected() {
        let mut cfg = small(Attention::None);
        cfg.channels[2] = 7;
        assert!(matches!(Lcnn::<f32>::build(cfg, 0), Err(Error::Config(m)) if m.contains("even")));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Lcnn::<f32>::build(small(Attention::SeCbam), 5).unwrap();
        let b = Lcnn::<f32>::build(small(Attention::SeCbam), 5).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = Lcnn::<f32>::build(small(Attention::SeCbam), 6).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
        assert_eq!(a.param_count(), c.param_count());
    }

    #[test]
    fn zeros_give_finite_logits() {
        let cfg = small(Attention::Cbam);
        let m = Lcnn::<f32>::build(cfg.clone(), 1).unwrap();
        let x = Tensor::zeros(vec![2, 1, 16, 12]);
        let y = m.logits(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.all_finite());
    }

    #[test]
    fn batch_equals_concatenated_singles() {
        let cfg = small(Attention::Cbam);
        let m = Lcnn::<f32>::build(cfg.clone(), 2).unwrap();
        let x = input(&cfg, 2, 3);
        let both = m.logits(&x).unwrap();
        let a = m.logits(&x.narrow(0, 0, 1).unwrap()).unwrap();
        let b = m.logits(&x.narrow(0, 1, 1).unwrap()).unwrap();
        let cat = Tensor::concat(&[&a, &b], 0).unwrap();
        assert!(both.max_abs_diff(&cat) < 1e-5);
    }

    #[test]
    fn embed_feeds_fc2() {
        let cfg = small(Attention::Se);
        let m = Lcnn::<f32>::build(cfg.clone(), 4).unwrap();
        let x = input(&cfg, 2, 5);
        let e = m.embed(&x).unwrap();
        assert_eq!(e.shape(), &[2, 6]);
        let tape = Tape::new();
        let p = m.store().bind_frozen(&tape);
        let head = m.fc2.forward(&p, tape.constant(e)).unwrap().value();
        assert_eq!(head.data(), m.logits(&x).unwrap().data());
        assert_eq!(m.embed(&x).unwrap().data(), m.embed(&x).unwrap().data());
    }

    #[test]
    fn wrong_input_shape() {
        let m = Lcnn::<f32>::build(small(Attention::None), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 17, 12]);
        assert!(matches!(m.logits(&x), Err(Error::Contract { .. })));
    }

    #[test]
    fn training_forward_reports_all_norms() {
        let cfg = small(Attention::None);
        let mut m = Lcnn::<f32>::build(cfg.clone(), 0).unwrap();
        let x = input(&cfg, 2, 1);
        let tape = Tape::new();
        let p = m.store().bind(&tape);
        let out = m.forward(&p, tape.constant(x), ForwardOptions::train()).unwrap();
        assert_eq!(out.batch_stats.len(), 6);
        let stats = out.batch_stats;
        drop(tape);
        let before = m.store().get(m.store().find("bn2a.running_mean").unwrap()).clone();
        m.update_running_stats(&stats).unwrap();
        let after = m.store().get(m.store().find("bn2a.running_mean").unwrap());
        assert!(before.max_abs_diff(after) > 0.0);
    }

    #[test]
    fn bytes_round_trip_and_config_travels() {
        let m = Lcnn::<f32>::build(small(Attention::Se), 9).unwrap();
        let bytes = m.to_bytes();
        let back = Lcnn::from_bytes(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let m = Lcnn::<f32>::build(small(Attention::None), 9).unwrap();
        let mut bytes = m.to_bytes();
        let e = Lcnn::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(e, Error::Format { offset, .. } if offset > 0));
        bytes[0] = b'X';
        assert!(matches!(Lcnn::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
        let mut bytes = m.to_bytes();
        bytes[4] = 9;
        assert!(matches!(Lcnn::from_bytes(&bytes), Err(Error::Format { offset: 4, .. })));
    }
}
