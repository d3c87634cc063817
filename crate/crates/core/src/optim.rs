//! Optimizers. Both skip frozen parameters and keep state keyed by
//! parameter name.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Module, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LionConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for LionConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            weight_decay: 0.0,
        }
    }
}

/// Momentum buffers, one per trainable parameter.
#[derive(Clone, Debug)]
pub struct LionState<T> {
    pub cfg: LionConfig,
    pub momentum: HashMap<String, Tensor<T>>,
}

impl<T: Real> LionState<T> {
    pub fn new(model: &impl Module<T>, cfg: LionConfig) -> Self {
        let mut momentum = HashMap::new();
        model.visit(&mut |p| {
            if p.trainable {
                momentum.insert(p.name.clone(), Tensor::zeros(p.tensor.shape()));
            }
        });
        Self { cfg, momentum }
    }
}

/// One Lion update of every trainable parameter:
///
/// ```text
/// u = sign(b1 * m + (1 - b1) * g)
/// p = p - lr * (u + wd * p)
/// m = b2 * m + (1 - b2) * g
/// ```
///
/// with `sign(0) = 0`. Missing gradients count as zero.
pub fn lion_step<T: Real>(
    model: &mut impl Module<T>,
    grads: &HashMap<String, Tensor<T>>,
    state: &mut LionState<T>,
) -> Result<()> {
    let c = state.cfg;
    let (lr, b1, b2, wd) = (T::from_f64(c.lr), T::from_f64(c.beta1), T::from_f64(c.beta2), T::from_f64(c.weight_decay));
    let mut err = None;
    model.visit_mut(&mut |p| {
        if !p.trainable || err.is_some() {
            return;
        }
        let Some(m) = state.momentum.get_mut(&p.name) else {
            err = Some(Error::contract(format!("no optimizer state for {}", p.name)));
            return;
        };
        let g = grads.get(&p.name);
        if let Some(g) = g {
            if g.shape() != p.tensor.shape() {
                err = Some(Error::Shape {
                    expected: p.tensor.shape().to_vec(),
                    actual: g.shape().to_vec(),
                });
                return;
            }
        }
        let m = m.data_mut();
        for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(T::ZERO, |g| g.data()[i]);
            let u = (b1 * m[i] + (T::ONE - b1) * gi).signum0();
            *w -= lr * (u + wd * *w);
            m[i] = b2 * m[i] + (T::ONE - b2) * gi;
        }
    });
    err.map_or(Ok(()), Err)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: i32,
    moments: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut impl Module<T>, grads: &HashMap<String, Tensor<T>>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let step_size = T::from_f64(c.lr / bc1);
        let bc2_sqrt = T::from_f64(bc2.sqrt());
        let eps = T::from_f64(c.eps);
        let decay = T::from_f64(1.0 - c.lr * c.weight_decay);
        let moments = &mut self.moments;
        model.visit_mut(&mut |p| {
            if !p.trainable {
                return;
            }
            let Some(g) = grads.get(&p.name) else { return };
            let n = p.numel();
            let (m, v) = moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![T::ZERO; n], vec![T::ZERO; n]));
            for (i, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (T::ONE - b1) * gi;
                v[i] = b2 * v[i] + (T::ONE - b2) * gi * gi;
                *w = *w * decay - step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        });
    }
}
