//! Shared fixtures for the pipeline benchmarks.

use defectgen_core::data::generate_sample;
use defectgen_core::train::TrainConfig;
use defectgen_core::{Image, TdiaConfig, TrainableSystem};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Desk-default model at the standard 32x32 corpus resolution.
pub fn desk_system() -> TrainableSystem {
    let cfg = TrainConfig {
        model: TdiaConfig::default(),
        ..TrainConfig::default()
    };
    let labels = ["striped", "checker", "disc", "scratch", "spot", "crack"];
    TrainableSystem::new(cfg, defectgen_core::Vocabulary::from_labels(labels).unwrap()).unwrap()
}

/// Standard-normal image tensor from a fixed stream.
pub fn noise_image(seed: u64, size: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn((3, size, size), |_| rng.sample::<f64, _>(StandardNormal))
}

/// One rendered corpus sample for realistic pixel statistics.
pub fn corpus_image(seed: u64) -> Image {
    generate_sample("striped", "scratch", 32, seed)
        .expect("corpus sample renders")
        .image
}
