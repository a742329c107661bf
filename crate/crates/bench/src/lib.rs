//! Fixtures shared by the benchmarks.

use geoflow::synthdata::{generate_dataset, Sample, Split};
use geoflow::training::{Batch, TrainConfig};
use geoflow::{Shape, Tensor};

/// Deterministic pseudo-random values in [−1, 1].
pub fn noise(shape: Shape, seed: u32) -> Tensor<f32> {
    let mut s = seed.wrapping_mul(2_654_435_761).max(1);
    Tensor::from_fn(shape, |_| {
        s ^= s << 13;
        s ^= s >> 17;
        s ^= s << 5;
        s as f32 / u32::MAX as f32 * 2.0 - 1.0
    })
}

/// A smooth displacement field of up to `amp` pixels.
pub fn smooth_flow(n: usize, h: usize, w: usize, amp: f32) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(n, 2, h, w), |[b, c, i, j]| {
        let phase = (b + c) as f32;
        amp * ((i as f32 * 0.2 + phase).sin() * (j as f32 * 0.15).cos())
    })
}

/// One batch per domain from a small synthetic dataset, plus a training
/// configuration sized to match.
pub fn train_fixture(width: usize, batch: usize) -> (TrainConfig, Batch, Batch) {
    let cfg = TrainConfig {
        width,
        batch_size: batch,
        ..TrainConfig::default()
    };
    let data = generate_dataset(0, batch * 10, cfg.image_size);
    let take = |pool: &[Sample]| {
        let s: Vec<Sample> = pool[..batch].to_vec();
        Batch::from_samples(&s, (0..batch).collect()).expect("uniform samples")
    };
    let a = take(data.split(0, Split::Train));
    let b = take(data.split(1, Split::Train));
    (cfg, a, b)
}
