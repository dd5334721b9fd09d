//! Shared fixtures for the benchmarks.

use distill_core::config::TrainConfig;
use distill_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in [-1, 1].
pub fn images(batch: usize, channels: usize, size: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = batch * channels * size * size;
    Tensor::new(vec![batch, channels, size, size], (0..n).map(|_| r.random_range(-1.0f32..1.0)).collect())
        .expect("image batch")
}

/// The digit setup: one 10-class labeled factor, a 16-dim unknown.
pub fn digit_config() -> TrainConfig {
    TrainConfig::from_toml(
        r#"
image_size = 28
[dataset]
name = "mnist"
[train]
batch_size = 32
[[factors]]
name = "digit"
kind = "labeled-discrete"
num_classes = 10
code_dim = 8
[[factors]]
name = "style"
kind = "unknown"
code_dim = 16
"#,
    )
    .expect("bench config")
}
