//! Light CNN with max feature map activations for acoustic scene
//! classification: a small tape-based autodiff engine, the network and its
//! attention gates, log-mel features, augmentation, and the training and
//! evaluation protocol.

pub mod attention;
pub mod augment;
pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod layers;
pub mod lcnn;
pub mod metrics;
pub mod params;
pub mod run;
pub mod synth;
pub mod tensor;
pub mod train;

pub use augment::AugmentConfig;
pub use autodiff::{Tape, Var};
pub use dataset::{DatasetIndex, Entry, Split};
pub use error::{Error, Result};
pub use features::{Extractor, FeatureConfig, NormStats};
pub use lcnn::{Attention, Lcnn, LcnnConfig};
pub use metrics::Metrics;
pub use run::{FeatureCache, RunConfig};
pub use tensor::{Real, Tensor};
pub use train::{Average, EpochLog, Example, TrainConfig, WarmRestarts};
