//! The run configuration file and the content-addressed feature cache.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::{emit, Fields};
use crate::dataset::default_labels;
use crate::error::{Error, Result};
use crate::features::{read_cache, write_cache, Extractor, FeatureConfig};
use crate::lcnn::LcnnConfig;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub index: PathBuf,
    pub cache_dir: PathBuf,
    pub model: PathBuf,
    pub log: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            index: "index.tsv".into(),
            cache_dir: "cache".into(),
            model: "model.lcn".into(),
            log: "train.log".into(),
        }
    }
}

/// Everything a run needs: seed, label set, paths and every model, feature,
/// training and augmentation knob.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub labels: Vec<String>,
    pub paths: Paths,
    pub model: LcnnConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            labels: default_labels(),
            paths: Paths::default(),
            model: LcnnConfig::default(),
            features: FeatureConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse_labels(s: &str) -> Result<Vec<String>> {
    let labels: Vec<String> = s.split(',').map(|l| l.trim().to_owned()).collect();
    if labels.iter().any(|l| l.is_empty() || l.contains(char::is_whitespace)) {
        return Err(Error::Config(format!("labels must be non-empty and without whitespace: {s:?}")));
    }
    Ok(labels)
}

impl RunConfig {
    /// Canonical text: every key, fixed order.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        emit(&mut s, "run.seed", self.seed);
        emit(&mut s, "data.labels", self.labels.join(","));
        emit(&mut s, "paths.index", self.paths.index.display());
        emit(&mut s, "paths.cache_dir", self.paths.cache_dir.display());
        emit(&mut s, "paths.model", self.paths.model.display());
        emit(&mut s, "paths.log", self.paths.log.display());
        self.model.emit(&mut s);
        self.features.emit(&mut s);
        self.train.emit(&mut s);
        s
    }

    /// Parses over the defaults. Unknown keys are an error; validation is
    /// separate so that a partial file can be inspected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = Fields::parse(text)?;
        let mut c = RunConfig::default();
        f.take("run.seed", &mut c.seed)?;
        f.take_with("data.labels", &mut c.labels, parse_labels)?;
        f.take("paths.index", &mut c.paths.index)?;
        f.take("paths.cache_dir", &mut c.paths.cache_dir)?;
        f.take("paths.model", &mut c.paths.model)?;
        f.take("paths.log", &mut c.paths.log)?;
        c.model.read(&mut f)?;
        c.features.read(&mut f)?;
        c.train.read(&mut f)?;
        f.finish()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.features.validate()?;
        self.train.validate()?;
        self.train.augment.validate(self.model.input_frames, self.model.input_bins)?;
        if self.model.input_bins != self.features.n_mels {
            return Err(Error::Config(format!(
                "model.bins ({}) must equal features.n_mels ({})",
                self.model.input_bins, self.features.n_mels
            )));
        }
        if self.model.num_classes != self.labels.len() {
            return Err(Error::Config(format!(
                "model.classes ({}) must equal the number of data.labels ({})",
                self.model.num_classes,
                self.labels.len()
            )));
        }
        let mut sorted = self.labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.labels.len() {
            return Err(Error::Config("data.labels contains duplicates".into()));
        }
        Ok(())
    }
}

/// Log-mel cache keyed by the SHA-256 of the audio bytes and the canonical
/// feature configuration, so edits to either invalidate the entry.
pub struct FeatureCache {
    dir: PathBuf,
    extractor: Extractor,
    config_text: String,
}

impl FeatureCache {
    pub fn new(dir: &Path, cfg: &FeatureConfig) -> Result<Self> {
        let mut config_text = String::new();
        cfg.emit(&mut config_text);
        Ok(FeatureCache { dir: dir.to_owned(), extractor: Extractor::new(cfg)?, config_text })
    }

    pub fn key(&self, audio: &[u8]) -> String {
        let mut h = Sha256::new();
        h.update(self.config_text.as_bytes());
        h.update(audio);
        h.finalize().iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Cache file path for the WAV at `wav`.
    pub fn entry(&self, wav: &Path) -> Result<PathBuf> {
        let bytes = std::fs::read(wav)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", wav.display())))?;
        Ok(self.dir.join(format!("{}.msp", self.key(&bytes))))
    }

    /// Returns the cached spec, extracting and storing it first if absent.
    /// The flag tells whether extraction ran.
    pub fn get(&self, wav: &Path) -> Result<(Tensor<f32>, bool)> {
        let entry = self.entry(wav)?;
        if entry.is_file() {
            return Ok((read_cache(&entry)?, false));
        }
        let spec = self
            .extractor
            .from_file(wav)
            .map_err(|e| Error::Data(format!("{}: {e}", wav.display())))?;
        std::fs::create_dir_all(&self.dir)?;
        write_cache(&entry, &spec)?;
        Ok((spec, true))
    }
}
