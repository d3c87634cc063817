//! Plug-in residual defenders for frozen image classifiers.
//!
//! A defender embeds an image into patch tokens, runs them through a small
//! processor (a transformer by default), rearranges the tokens back into
//! pixels with a parameter-free pixel shuffle and adds the result to the
//! input before the frozen victim sees it. Only the processor's layer-norm
//! parameters are tuned, on a handful of adversarial examples.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod attacks;
pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod defender;
pub mod defense;
pub mod error;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod tensor;
#[cfg(test)]
mod testutil;
pub mod trainer;
pub mod victims;

pub use autodiff::{grad_check, grad_check_module, Graph, Gradients, Var};
pub use checkpoint::Checkpoint;
pub use data::Dataset;
pub use defense::Defense;
pub use error::{Error, Result};
pub use rng::{Rng, Stream};
pub use tensor::{Module, Parameter, Real, Tensor};
pub use victims::{accuracy, VictimConfig, VictimKind, VictimModel};
