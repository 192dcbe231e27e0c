//! Deterministic inputs shared by the benchmarks.

use mfmasc_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape.to_vec(), &mut rng(seed))
}

/// `seconds` of a 1 kHz tone at 44.1 kHz.
pub fn tone(seconds: f64) -> Vec<f32> {
    let n = (seconds * 44100.0) as usize;
    (0..n).map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 44100.0).sin() as f32 * 0.5).collect()
}
