use serde::{Deserialize, Serialize};

use super::Linear;
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{Module, Parameter, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
}

/// `linear -> activation -> linear`.
#[derive(Clone, Debug)]
pub struct FeedForward<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub activation: Activation,
}

impl<T: Real> FeedForward<T> {
    pub fn new(name: &str, grp: &str, dim: usize, hidden: usize, activation: Activation, rng: &mut Rng) -> Self {
        assert!(hidden >= 1, "feed-forward hidden width must be positive");
        Self {
            fc1: Linear::new(&format!("{name}.fc1"), grp, dim, hidden, true, rng),
            fc2: Linear::new(&format!("{name}.fc2"), grp, hidden, dim, true, rng),
            activation,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = match self.activation {
            Activation::Identity => h,
            Activation::Relu => g.relu(h),
            Activation::Gelu => g.gelu(h),
        };
        self.fc2.forward(g, h)
    }
}

impl<T: Real> Module<T> for FeedForward<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}
