//! Shared fixtures for the benchmarks.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tfdpm::{ExtractorKind, RunConfig, Tfdpm};

/// Untrained model with default sizes on `dim` channels.
pub fn model(kind: ExtractorKind, dim: usize) -> Tfdpm {
    let cfg = RunConfig {
        extractor: kind,
        ..RunConfig::default()
    };
    Tfdpm::new(&cfg, dim).expect("default config is valid")
}

/// Uniform history windows `[b, omega, dim]` and targets `[b, dim]`.
pub fn windows(b: usize, omega: usize, dim: usize, seed: u64) -> (Array3<f64>, Array2<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = Array3::from_shape_fn((b, omega, dim), |_| rng.random_range(0.0..1.0));
    let t = Array2::from_shape_fn((b, dim), |_| rng.random_range(0.0..1.0));
    (h, t)
}
