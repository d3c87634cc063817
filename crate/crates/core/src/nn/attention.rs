use serde::{Deserialize, Serialize};

use super::{Activation, FeedForward, LayerNorm, Linear};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{group, Module, Parameter, Real};

/// Where the two layer norms of a transformer layer sit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// `x + attn(ln1(x))`, then `h + ffn(ln2(h))` (ViT style).
    #[default]
    PreNorm,
    /// `ln1(x + attn(x))`, then `ln2(h + ffn(h))` (BERT style).
    PostNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub dim: usize,
    pub heads: usize,
    /// Feed-forward hidden width; 4 * dim when absent.
    #[serde(default)]
    pub ffn_hidden: Option<usize>,
    #[serde(default)]
    pub arrangement: Arrangement,
    /// Decoder-style masking: token `i` only attends to tokens `<= i`.
    #[serde(default)]
    pub causal: bool,
}

impl TransformerConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            ffn_hidden: None,
            arrangement: Arrangement::PreNorm,
            causal: false,
        }
    }

    pub fn hidden(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.dim)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerLayer<T> {
    pub cfg: TransformerConfig,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub ffn: FeedForward<T>,
    pub ln1: LayerNorm<T>,
    pub ln2: LayerNorm<T>,
}

impl<T: Real> TransformerLayer<T> {
    pub fn new(name: &str, cfg: &TransformerConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.dim;
        if cfg.heads == 0 || d % cfg.heads != 0 {
            return Err(Error::config(format!("dim {d} not divisible by {} heads", cfg.heads)));
        }
        let lin = |n: &str, rng: &mut Rng| Linear::new(&format!("{name}.attn.{n}"), group::ATTENTION, d, d, true, rng);
        Ok(Self {
            cfg: cfg.clone(),
            query: lin("query", rng),
            key: lin("key", rng),
            value: lin("value", rng),
            output: lin("output", rng),
            ffn: FeedForward::new(&format!("{name}.ffn"), group::FFN, d, cfg.hidden(), Activation::Gelu, rng),
            ln1: LayerNorm::new(&format!("{name}.ln1"), d),
            ln2: LayerNorm::new(&format!("{name}.ln2"), d),
        })
    }

    /// Multi-head self-attention on `[B, T, d]`, output-projected.
    pub fn self_attention(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let a = g.attention(q, k, v, self.cfg.heads, self.cfg.causal)?;
        self.output.forward(g, a)
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self.cfg.arrangement {
            Arrangement::PreNorm => {
                let h = self.ln1.forward(g, x)?;
                let a = self.self_attention(g, h)?;
                let x = g.add(x, a)?;
                let h = self.ln2.forward(g, x)?;
                let f = self.ffn.forward(g, h)?;
                g.add(x, f)
            }
            Arrangement::PostNorm => {
                let a = self.self_attention(g, x)?;
                let s = g.add(x, a)?;
                let h = self.ln1.forward(g, s)?;
                let f = self.ffn.forward(g, h)?;
                let s = g.add(h, f)?;
                self.ln2.forward(g, s)
            }
        }
    }

    /// Zeroes the attention and feed-forward output projections, leaving
    /// only the residual paths.
    pub fn zero_branches(&mut self) {
        self.output.zero();
        self.ffn.fc2.zero();
    }
}

impl<T: Real> Module<T> for TransformerLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.ln1.visit(f);
        self.query.visit(f);
        self.key.visit(f);
        self.value.visit(f);
        self.output.visit(f);
        self.ln2.visit(f);
        self.ffn.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.ln1.visit_mut(f);
        self.query.visit_mut(f);
        self.key.visit_mut(f);
        self.value.visit_mut(f);
        self.output.visit_mut(f);
        self.ln2.visit_mut(f);
        self.ffn.visit_mut(f);
    }
}

/// Applies the layers in order.
pub fn transformer_forward<T: Real>(g: &mut Graph<T>, tokens: Var, layers: &[TransformerLayer<T>]) -> Result<Var> {
    layers.iter().try_fold(tokens, |x, layer| layer.forward(g, x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;
    use crate::tensor::Tensor;

    fn random_tokens(b: usize, t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut r = Rng::new(seed, Stream::Data);
        Tensor::new(vec![b, t, d], (0..b * t * d).map(|_| r.normal()).collect()).unwrap()
    }

    fn run(f: impl FnOnce(&mut Graph<f64>, Var) -> Result<Var>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = f(&mut g, v).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn single_token_attention_is_output_of_value() {
        let mut rng = Rng::new(3, Stream::Init);
        let layer = TransformerLayer::<f64>::new("l", &TransformerConfig::new(4, 2), &mut rng).unwrap();
        let x = random_tokens(1, 1, 4, 1);
        let got = run(|g, v| layer.self_attention(g, v), &x);
        let want = run(
            |g, v| {
                let val = layer.value.forward(g, v)?;
                layer.output.forward(g, val)
            },
            &x,
        );
        assert!(got.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_outputs() {
        let mut rng = Rng::new(3, Stream::Init);
        let layer = TransformerLayer::<f64>::new("l", &TransformerConfig::new(4, 2), &mut rng).unwrap();
        let row = [0.3, -1.0, 0.5, 2.0];
        let x = Tensor::from_f64(&[1, 3, 4], &row.repeat(3)).unwrap();
        let y = run(|g, v| layer.self_attention(g, v), &x);
        let d = y.data();
        for t in 1..3 {
            for j in 0..4 {
                assert!((d[t * 4 + j] - d[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_token_attention_matches_hand_oracle() {
        // d = 2, h = 1 with identity projections and zero biases:
        // softmax(X X^T / sqrt(2)) X
        let mut rng = Rng::new(3, Stream::Init);
        let mut layer = TransformerLayer::<f64>::new("l", &TransformerConfig::new(2, 1), &mut rng).unwrap();
        for lin in [&mut layer.query, &mut layer.key, &mut layer.value, &mut layer.output] {
            lin.zero();
            lin.weight.tensor.data_mut()[0] = 1.0;
            lin.weight.tensor.data_mut()[3] = 1.0;
        }
        let x = [1.0, 0.0, 0.5, 2.0];
        let got = run(|g, v| layer.self_attention(g, v), &Tensor::from_f64(&[1, 2, 2], &x).unwrap());
        let s = 1.0 / 2f64.sqrt();
        let scores = [
            [(x[0] * x[0] + x[1] * x[1]) * s, (x[0] * x[2] + x[1] * x[3]) * s],
            [(x[2] * x[0] + x[3] * x[1]) * s, (x[2] * x[2] + x[3] * x[3]) * s],
        ];
        for i in 0..2 {
            let e0 = scores[i][0].exp();
            let e1 = scores[i][1].exp();
            let (p0, p1) = (e0 / (e0 + e1), e1 / (e0 + e1));
            let want = [p0 * x[0] + p1 * x[2], p0 * x[1] + p1 * x[3]];
            assert!((got.data()[i * 2] - want[0]).abs() < 1e-12);
            assert!((got.data()[i * 2 + 1] - want[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let x = random_tokens(2, 3, 4, 2);
        let y = run(|g, v| transformer_forward(g, v, &[]), &x);
        assert_eq!(x, y);
    }

    #[test]
    fn zeroed_branches_prenorm_is_identity() {
        let mut rng = Rng::new(3, Stream::Init);
        let mut layer = TransformerLayer::<f64>::new("l", &TransformerConfig::new(8, 2), &mut rng).unwrap();
        layer.zero_branches();
        let x = random_tokens(2, 5, 8, 4);
        let y = run(|g, v| layer.forward(g, v), &x);
        assert_eq!(x, y);
    }

    #[test]
    fn two_layers_compose() {
        let mut rng = Rng::new(11, Stream::Init);
        let cfg = TransformerConfig::new(8, 2);
        let layers = vec![
            TransformerLayer::<f64>::new("a", &cfg, &mut rng).unwrap(),
            TransformerLayer::<f64>::new("b", &cfg, &mut rng).unwrap(),
        ];
        let x = random_tokens(1, 4, 8, 5);
        let both = run(|g, v| transformer_forward(g, v, &layers), &x);
        let first = run(|g, v| layers[0].forward(g, v), &x);
        let second = run(|g, v| layers[1].forward(g, v), &first);
        assert!(both.max_abs_diff(&second) < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut rng = Rng::new(2, Stream::Init);
        let layer = TransformerLayer::<f64>::new("l", &TransformerConfig::new(8, 4), &mut rng).unwrap();
        let x = random_tokens(1, 5, 8, 9);
        let perm = [3, 0, 4, 1, 2];
        let xp = x.clone().reshape(&[5, 8]).unwrap().select_axis0(&perm).reshape(&[1, 5, 8]).unwrap();
        let y = run(|g, v| layer.self_attention(g, v), &x).reshape(&[5, 8]).unwrap();
        let yp = run(|g, v| layer.self_attention(g, v), &xp).reshape(&[5, 8]).unwrap();
        assert!(y.select_axis0(&perm).max_abs_diff(&yp) < 1e-12);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = Rng::new(2, Stream::Init);
        assert!(TransformerLayer::<f64>::new("l", &TransformerConfig::new(6, 4), &mut rng).is_err());
    }

    #[test]
    fn exactly_four_layer_norm_vectors() {
        let mut rng = Rng::new(2, Stream::Init);
        let layer = TransformerLayer::<f32>::new("l", &TransformerConfig::new(8, 2), &mut rng).unwrap();
        let mut n = 0;
        layer.visit(&mut |p| n += (p.group == group::LAYER_NORM) as usize);
        assert_eq!(n, 4);
    }
}
