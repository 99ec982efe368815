//! Shared fixtures for the benchmark targets.

use lbcnn_core::data::Dataset;
use lbcnn_core::rng::SplitMix64;
use lbcnn_core::tensor::{Architecture, Tensor4};

/// A deterministic fake image batch in `0..=255`.
pub fn random_images(n: usize, h: usize, w: usize, c: usize, seed: u64) -> Tensor4 {
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f32> = (0..n * h * w * c)
        .map(|_| rng.next_below(256) as f32)
        .collect();
    Tensor4::new(data, (n, h, w, c)).unwrap()
}

/// Normalized dataset over `n_classes` deterministic labels.
pub fn random_dataset(n: usize, arch: &Architecture, seed: u64) -> Dataset {
    let (h, w, c) = arch.input_shape;
    let mut rng = SplitMix64::new(seed);
    let labels: Vec<usize> = (0..n)
        .map(|_| rng.next_below(arch.n_classes as u64) as usize)
        .collect();
    let raw = Dataset::new(random_images(n, h, w, c, seed ^ 1), labels, arch.n_classes, None)
        .unwrap();
    lbcnn_core::data::normalize(&raw).unwrap()
}
