#![allow(dead_code)]

use plugdef_core::defender::{build_defender, DefenderConfig, PartitionPolicy, ProcessorKind};
use plugdef_core::nn::{Activation, Arrangement, FeedForward, LayerNorm, Linear, TransformerConfig, TransformerLayer};
use plugdef_core::tensor::group;
use plugdef_core::{grad_check_module, Graph, Module, Parameter, Result, Rng, Stream, Tensor, Var};

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

/// A module plus an input tensor checked as a parameter.
pub struct WithInput<M> {
    pub m: M,
    pub x: Parameter<f64>,
    pub weights: Tensor<f64>,
}

impl<M: Module<f64>> Module<f64> for WithInput<M> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
        self.m.visit(f);
        f(&self.x);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
        self.m.visit_mut(f);
        f(&mut self.x);
    }
}

pub fn random(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| scale * rng.normal()).collect()).unwrap()
}

fn randomize<M: Module<f64>>(m: &mut M, rng: &mut Rng, scale: f64) {
    m.visit_mut(&mut |p| p.tensor.data_mut().iter_mut().for_each(|v| *v = scale * rng.normal()));
}

/// `sum(y * w)` for a fixed random `w`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph<f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(w.clone());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check<M: Module<f64>>(
    mut wi: WithInput<M>,
    f: impl Fn(&mut Graph<f64>, &M, Var) -> Result<Var>,
) -> f64 {
    let report = grad_check_module(
        &mut wi,
        |g, wi| {
            let x = g.param(&wi.x);
            let y = f(g, &wi.m, x)?;
            weighted_sum(g, y, &wi.weights)
        },
        GRAD_STEP,
    )
    .unwrap();
    report.max_rel_error
}

fn with_input<M>(m: M, x: &[usize], y: &[usize], rng: &mut Rng) -> WithInput<M> {
    WithInput {
        m,
        x: Parameter::new("input", "input", random(x, rng, 1.0)),
        weights: random(y, rng, 1.0),
    }
}

pub fn linear_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed, Stream::Init);
    let lin = Linear::<f64>::new("lin", group::LINEAR, 6, 5, true, &mut rng);
    let wi = with_input(lin, &[3, 6], &[3, 5], &mut rng);
    check(wi, |g, m, x| m.forward(g, x))
}

pub fn layer_norm_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed, Stream::Init);
    let mut ln = LayerNorm::<f64>::new("ln", 6);
    randomize(&mut ln, &mut rng, 1.0);
    let wi = with_input(ln, &[2, 3, 6], &[2, 3, 6], &mut rng);
    check(wi, |g, m, x| m.forward(g, x))
}

pub fn ffn_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed, Stream::Init);
    let ffn = FeedForward::<f64>::new("ffn", group::FFN, 8, 16, Activation::Gelu, &mut rng);
    let wi = with_input(ffn, &[2, 3, 8], &[2, 3, 8], &mut rng);
    check(wi, |g, m, x| m.forward(g, x))
}

/// Bare attention, causal attention and both full layer arrangements.
pub fn attention_case(seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for (causal, arrangement) in [
        (false, Arrangement::PreNorm),
        (true, Arrangement::PreNorm),
        (false, Arrangement::PostNorm),
    ] {
        let mut rng = Rng::new(seed, Stream::Init);
        let cfg = TransformerConfig {
            ffn_hidden: Some(12),
            arrangement,
            causal,
            ..TransformerConfig::new(8, 2)
        };
        let mut layer = TransformerLayer::<f64>::new("layer", &cfg, &mut rng).unwrap();
        randomize(&mut layer, &mut rng, 0.4);
        let wi = with_input(layer.clone(), &[2, 4, 8], &[2, 4, 8], &mut rng);
        worst = worst.max(check(wi, |g, m, x| m.self_attention(g, x)));
        let wi = with_input(layer, &[2, 4, 8], &[2, 4, 8], &mut rng);
        worst = worst.max(check(wi, |g, m, x| m.forward(g, x)));
    }
    worst
}

/// Patch embedding, one transformer layer and the pixel-shuffle decoder
/// with the residual add.
pub fn composite_case(seed: u64) -> f64 {
    let mut rng = Rng::new(seed, Stream::Init);
    let cfg = DefenderConfig {
        channels: 1,
        height: 8,
        width: 8,
        patch: 4,
        dim: 16,
        processor: ProcessorKind::transformer(1, 2),
        policy: PartitionPolicy::All,
        zero_init: false,
        init_seed: seed,
        ..DefenderConfig::default()
    };
    let d = build_defender::<f64>(&cfg).unwrap();
    let wi = with_input(d, &[2, 1, 8, 8], &[2, 1, 8, 8], &mut rng);
    check(wi, |g, m, x| m.forward(g, x))
}

pub type GradCase = (&'static str, fn(u64) -> f64);

pub fn grad_cases() -> [GradCase; 5] {
    [
        ("linear", linear_case),
        ("attention", attention_case),
        ("layer_norm", layer_norm_case),
        ("ffn", ffn_case),
        ("patch_embed_decode", composite_case),
    ]
}
