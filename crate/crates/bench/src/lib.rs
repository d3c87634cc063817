//! Fixtures shared by the benches.

use plugdef_core::victims::{VictimConfig, VictimModel};
use plugdef_core::{Rng, Stream, Tensor};

/// `n` uniform images of shape `[3, 32, 32]`.
pub fn images(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::new(seed, Stream::Data);
    Tensor::new(vec![n, 3, 32, 32], (0..n * 3 * 1024).map(|_| rng.uniform() as f32).collect()).unwrap()
}

/// Untrained default tiny-ViT, frozen.
pub fn victim() -> VictimModel<f32> {
    let mut m = VictimModel::new(&VictimConfig::default(), 0).unwrap();
    m.freeze();
    m
}
