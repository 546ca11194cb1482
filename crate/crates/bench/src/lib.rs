//! Input builders shared by the benchmarks.

use floodfuse::synth::{generate, SceneParams};
use floodfuse::{Chip, Tensor};

/// Deterministic values in `[-1, 1)` without pulling in an RNG.
pub fn pseudo_random(shape: &[usize], salt: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| {
        let v = ((i as f64 + salt) * 12.9898).sin() * 43_758.545_3;
        2.0 * (v - v.floor()) - 1.0
    })
}

/// A small synthetic scene, enough chips for a few batches.
pub fn chips() -> Vec<Chip> {
    let p = SceneParams { grid: 2, fine_factor: 2, years: vec![2019], sample_stride: 8, ..SceneParams::default() };
    generate(&p).expect("default-derived params are valid")
}
