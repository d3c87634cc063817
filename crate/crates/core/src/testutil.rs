//! Fixtures shared by unit tests.

use crate::data::Dataset;
use crate::rng::{Rng, Stream};
use crate::tensor::{Module, Real, Tensor};
use crate::victims::{accuracy, VictimConfig, VictimKind, VictimModel};

/// Two classes told apart by mean brightness.
pub fn toy_data(n: usize, seed: u64) -> Dataset {
    let mut rng = Rng::new(seed, Stream::Data);
    let (c, h, w) = (1, 8, 8);
    let mut px = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % 2;
        let base = if y == 0 { 0.35 } else { 0.65 };
        px.extend((0..c * h * w).map(|_| (base + 0.1 * rng.normal()).clamp(0.0, 1.0) as f32));
        labels.push(y);
    }
    Dataset::new("toy", Tensor::new(vec![n, c, h, w], px).unwrap(), labels, 2).unwrap()
}

pub fn toy_victim<T: Real>() -> VictimModel<T> {
    let ds = toy_data(64, 1);
    let cfg = VictimConfig {
        kind: VictimKind::Mlp,
        channels: 1,
        height: 8,
        width: 8,
        num_classes: 2,
        hidden: 16,
        ..VictimConfig::default()
    };
    let mut m = VictimModel::<T>::new(&cfg, 5).unwrap();
    // Hand-set weights: logit difference is 40 * (mean - 0.5).
    m.visit_mut(&mut |p| p.tensor.data_mut().fill(T::ZERO));
    m.visit_mut(&mut |p| {
        let d = p.tensor.data_mut();
        match p.name.as_str() {
            "fc1.weight" => {
                for i in 0..64 {
                    d[i * 16] = T::from_f64(1.0 / 64.0);
                }
            }
            "fc2.weight" => d[0] = T::ONE,
            "head.weight" => {
                d[0] = T::from_f64(-40.0);
                d[1] = T::from_f64(40.0);
            }
            "head.bias" => {
                d[0] = T::from_f64(20.0);
                d[1] = T::from_f64(-20.0);
            }
            _ => {}
        }
    });
    m.freeze();
    assert_eq!(accuracy(&m, &ds.images.cast(), &ds.labels, None, None).unwrap(), 1.0);
    m
}
