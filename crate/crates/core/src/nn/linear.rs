use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{group, Module, Parameter, Real, Tensor};

/// Dense layer, weight stored `[in, out]` so the forward pass is `x @ W + b`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
}

impl<T: Real> Linear<T> {
    /// Uniform `±1/sqrt(in)` init for weight and bias.
    pub fn new(name: &str, grp: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<T> {
            (0..n).map(|_| T::from_f64(rng.uniform_range(-bound, bound))).collect()
        };
        let w = Tensor::new(vec![fan_in, fan_out], draw(fan_in * fan_out)).expect("shape");
        let b = bias.then(|| Tensor::new(vec![fan_out], draw(fan_out)).expect("shape"));
        Self {
            weight: Parameter::new(format!("{name}.weight"), grp, w),
            bias: b.map(|b| Parameter::new(format!("{name}.bias"), grp, b)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.tensor.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.tensor.shape()[1]
    }

    pub fn zero(&mut self) {
        self.visit_mut(&mut |p| p.tensor.data_mut().fill(T::ZERO));
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = self.bias.as_ref().map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

impl<T: Real> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub eps: f64,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), group::LAYER_NORM, Tensor::full(&[dim], T::ONE)),
            beta: Parameter::new(format!("{name}.beta"), group::LAYER_NORM, Tensor::zeros(&[dim])),
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gm = g.param(&self.gamma);
        let bt = g.param(&self.beta);
        g.layer_norm(x, gm, bt, self.eps)
    }
}

impl<T: Real> Module<T> for LayerNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}
