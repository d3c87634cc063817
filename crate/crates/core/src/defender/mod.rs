//! The plug-in defender: patch embedding, a token processor, a pixel-shuffle
//! decoder and a residual add, `defend(x) = x + decode(process(embed(x)))`.

mod pretrain;

use serde::{Deserialize, Serialize};

pub use pretrain::{proxy_corpus, proxy_pretrain, PretrainConfig, ProxyDomain};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::defense::Defense;
use crate::error::{Error, Result};
use crate::nn::{Activation, Arrangement, FeedForward, LayerNorm, Linear, PatchEmbedding, PixelShuffleDecoder, TransformerConfig, TransformerLayer};
use crate::rng::{Rng, Stream};
use crate::tensor::{group, Module, Parameter, Real, Tensor};

/// What sits between the embedding and the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProcessorKind {
    Transformer {
        layers: usize,
        heads: usize,
        #[serde(default)]
        causal: bool,
        #[serde(default = "post_norm")]
        arrangement: Arrangement,
    },
    /// One linear layer, no activation.
    Linear,
    /// `d -> 2d -> d` with ReLU.
    Ffn,
    /// `d -> d/2 -> d` with ReLU.
    Bottleneck,
    /// Non-local token mixing, then a two-layer channel mix through
    /// `hidden` features, plus an identity skip.
    Fd {
        #[serde(default)]
        hidden: Option<usize>,
    },
}

fn post_norm() -> Arrangement {
    Arrangement::PostNorm
}

impl ProcessorKind {
    pub fn transformer(layers: usize, heads: usize) -> Self {
        ProcessorKind::Transformer {
            layers,
            heads,
            causal: false,
            arrangement: Arrangement::PostNorm,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ProcessorKind::Transformer { causal: true, .. } => "transformer-causal".into(),
            ProcessorKind::Transformer { .. } => "transformer".into(),
            ProcessorKind::Linear => "linear".into(),
            ProcessorKind::Ffn => "ffn".into(),
            ProcessorKind::Bottleneck => "bottleneck".into(),
            ProcessorKind::Fd { .. } => "fd".into(),
        }
    }
}

/// Which defender parameters are tuned.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionPolicy {
    #[default]
    LayerNormOnly,
    All,
    None,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitStrategy {
    /// Seeded random weights from the `init_seed` of the config.
    #[default]
    Random,
    /// Random weights, then masked-patch reconstruction on a proxy corpus.
    ProxyPretrained {
        domain: ProxyDomain,
        #[serde(default)]
        pretrain: PretrainConfig,
    },
    Checkpoint {
        path: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenderConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Patch size of the embedding and upscale factor of the decoder.
    pub patch: usize,
    pub dim: usize,
    pub processor: ProcessorKind,
    pub policy: PartitionPolicy,
    /// Add the input back after decoding.
    pub residual: bool,
    /// Layer norm at the end of the embedding.
    pub embed_norm: bool,
    /// Tune the embedding layer norm under the layer-norm-only policy.
    pub tune_embed_norm: bool,
    /// Start with a zero decoder input so the defender is the identity.
    pub zero_init: bool,
    pub init: InitStrategy,
    pub init_seed: u64,
}

impl Default for DefenderConfig {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 32,
            width: 32,
            patch: 8,
            dim: 192,
            processor: ProcessorKind::transformer(4, 4),
            policy: PartitionPolicy::LayerNormOnly,
            residual: true,
            embed_norm: false,
            tune_embed_norm: false,
            zero_init: true,
            init: InitStrategy::Random,
            init_seed: 0,
        }
    }
}

impl DefenderConfig {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn tokens(&self) -> usize {
        (self.height / self.patch.max(1)) * (self.width / self.patch.max(1))
    }

    /// Short description used in result rows.
    pub fn label(&self) -> String {
        let mut s = self.processor.label();
        if !self.residual {
            s.push_str("-without-res");
        }
        s
    }
}

#[derive(Clone, Debug)]
enum Processor<T> {
    Transformer(Vec<TransformerLayer<T>>),
    Linear(Linear<T>),
    Ffn(FeedForward<T>),
    Fd { mix_in: Linear<T>, mix_out: Linear<T> },
}

#[derive(Clone, Debug)]
pub struct DefenderModel<T> {
    pub cfg: DefenderConfig,
    pub embedding: PatchEmbedding<T>,
    embed_norm: Option<LayerNorm<T>>,
    processor: Processor<T>,
    pub decoder: PixelShuffleDecoder,
}

/// θ1 (tuned) and θ2 (frozen) parameter names.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Partition {
    pub theta1: Vec<String>,
    pub theta2: Vec<String>,
    /// Number of scalar variables in θ1.
    pub theta1_variables: usize,
    pub theta2_variables: usize,
}

impl Partition {
    /// One group per θ1 tensor.
    pub fn groups(&self) -> usize {
        self.theta1.len()
    }
}

/// Builds a randomly initialized defender, applying the zero-init and the
/// partition policy. `cfg.init` is resolved by [`init_defender`].
pub fn build_defender<T: Real>(cfg: &DefenderConfig) -> Result<DefenderModel<T>> {
    let [c, h, w] = cfg.input_shape();
    let p = cfg.patch;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("image {h}x{w} not divisible by patch {p}")));
    }
    let d = cfg.dim;
    if d < c * p * p {
        return Err(Error::config(format!(
            "defender dim {d} below the {} features the decoder needs",
            c * p * p
        )));
    }
    let mut rng = Rng::new(cfg.init_seed, Stream::Init);
    let embedding = PatchEmbedding::new("embedding", c, (h, w), p, d, &mut rng)?;
    let embed_norm = cfg.embed_norm.then(|| LayerNorm::new("embedding.norm", d));
    let processor = match &cfg.processor {
        ProcessorKind::Transformer {
            layers,
            heads,
            causal,
            arrangement,
        } => {
            let tc = TransformerConfig {
                causal: *causal,
                arrangement: *arrangement,
                ..TransformerConfig::new(d, *heads)
            };
            Processor::Transformer(
                (0..*layers)
                    .map(|i| TransformerLayer::new(&format!("encoder.layer{i}"), &tc, &mut rng))
                    .collect::<Result<_>>()?,
            )
        }
        ProcessorKind::Linear => Processor::Linear(Linear::new("processor.linear", group::LINEAR, d, d, true, &mut rng)),
        ProcessorKind::Ffn => Processor::Ffn(FeedForward::new("processor.ffn", group::FFN, d, 2 * d, Activation::Relu, &mut rng)),
        ProcessorKind::Bottleneck => {
            Processor::Ffn(FeedForward::new("processor.bottleneck", group::FFN, d, (d / 2).max(1), Activation::Relu, &mut rng))
        }
        ProcessorKind::Fd { hidden } => {
            let hd = hidden.unwrap_or(d);
            if hd == 0 {
                return Err(Error::config("fd hidden width must be positive"));
            }
            Processor::Fd {
                mix_in: Linear::new("processor.fd.mix_in", group::LINEAR, d, hd, true, &mut rng),
                mix_out: Linear::new("processor.fd.mix_out", group::LINEAR, hd, d, true, &mut rng),
            }
        }
    };
    let mut m = DefenderModel {
        cfg: cfg.clone(),
        embedding,
        embed_norm,
        processor,
        decoder: PixelShuffleDecoder::new(p, c),
    };
    if cfg.zero_init {
        m.zero_init_output()?;
    }
    m.apply_policy();
    Ok(m)
}

/// [`build_defender`] followed by the configured initialization.
/// `same_domain` supplies the proxy corpus for same-domain pretraining.
pub fn init_defender<T: Real>(cfg: &DefenderConfig, same_domain: Option<&crate::data::Dataset>) -> Result<DefenderModel<T>> {
    match &cfg.init {
        InitStrategy::Random => build_defender(cfg),
        InitStrategy::Checkpoint { path } => DefenderModel::from_checkpoint(&Checkpoint::load(path)?),
        InitStrategy::ProxyPretrained { domain, pretrain } => {
            let mut m = build_defender(cfg)?;
            let corpus = proxy_corpus(*domain, cfg, pretrain, same_domain)?;
            proxy_pretrain(&mut m, &corpus, pretrain)?;
            Ok(m)
        }
    }
}

impl<T: Real> DefenderModel<T> {
    pub fn grid(&self) -> (usize, usize) {
        self.embedding.grid()
    }

    fn is_embed_norm(name: &str) -> bool {
        name.starts_with("embedding.norm.")
    }

    /// Whether `p` belongs to θ1 under `policy`.
    fn in_theta1(&self, p: &Parameter<T>, policy: PartitionPolicy) -> bool {
        match policy {
            PartitionPolicy::All => true,
            PartitionPolicy::None => false,
            PartitionPolicy::LayerNormOnly => {
                p.group == group::LAYER_NORM && (!Self::is_embed_norm(&p.name) || self.cfg.tune_embed_norm)
            }
        }
    }

    /// Sets `trainable` to θ1 membership under the configured policy.
    pub fn apply_policy(&mut self) {
        let policy = self.cfg.policy;
        let mut flags = Vec::new();
        self.visit(&mut |p| flags.push(self.in_theta1(p, policy)));
        let mut it = flags.into_iter();
        self.visit_mut(&mut |p| p.trainable = it.next().expect("same visit order"));
    }

    /// Disjoint, exhaustive split of the parameters under `policy`.
    pub fn partition(&self, policy: PartitionPolicy) -> Partition {
        let mut part = Partition::default();
        self.visit(&mut |p| {
            if self.in_theta1(p, policy) {
                part.theta1.push(p.name.clone());
                part.theta1_variables += p.numel();
            } else {
                part.theta2.push(p.name.clone());
                part.theta2_variables += p.numel();
            }
        });
        part
    }

    /// Makes the decoder input zero at the current weights: the last layer
    /// norm of a post-norm transformer; otherwise the final projection.
    /// Fails where no single layer decides the output (pre-norm stacks).
    fn zero_init_output(&mut self) -> Result<()> {
        match &mut self.processor {
            Processor::Transformer(layers) => match layers.last_mut() {
                Some(last) if last.cfg.arrangement == Arrangement::PostNorm => {
                    last.ln2.visit_mut(&mut |p| p.tensor.data_mut().fill(T::ZERO));
                    Ok(())
                }
                _ => Err(Error::config("zero init needs a post-norm transformer with at least one layer")),
            },
            Processor::Linear(l) => {
                l.zero();
                Ok(())
            }
            Processor::Ffn(f) => {
                f.fc2.zero();
                Ok(())
            }
            Processor::Fd { .. } => Err(Error::config("zero init is undefined for fd: its skip carries the embedding")),
        }
    }

    /// Zeroes whatever feeds the decoder so `defend(x) == x` exactly, for
    /// every processor kind.
    pub fn zero_decode_path(&mut self) {
        if self.zero_init_output().is_ok() {
            return;
        }
        // Zero tokens stay zero through zeroed branches and skips.
        self.embedding.visit_mut(&mut |p| p.tensor.data_mut().fill(T::ZERO));
        if let Some(n) = &mut self.embed_norm {
            n.beta.tensor.data_mut().fill(T::ZERO);
            n.gamma.tensor.data_mut().fill(T::ZERO);
        }
        match &mut self.processor {
            Processor::Transformer(layers) => layers.iter_mut().for_each(|l| l.zero_branches()),
            Processor::Fd { mix_out, .. } => mix_out.zero(),
            Processor::Linear(l) => l.zero(),
            Processor::Ffn(f) => f.fc2.zero(),
        }
    }

    /// Processor output `[B, T, d]` for images `[B, C, H, W]`.
    pub fn features(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let mut x = self.embedding.forward(g, images)?;
        if let Some(n) = &self.embed_norm {
            x = n.forward(g, x)?;
        }
        match &self.processor {
            Processor::Transformer(layers) => {
                for l in layers {
                    x = l.forward(g, x)?;
                }
                Ok(x)
            }
            Processor::Linear(l) => l.forward(g, x),
            Processor::Ffn(f) => f.forward(g, x),
            Processor::Fd { mix_in, mix_out } => {
                let a = g.attention(x, x, x, 1, false)?;
                let h = mix_in.forward(g, a)?;
                let h = mix_out.forward(g, h)?;
                g.add(x, h)
            }
        }
    }

    /// `x + decode(features(x))`, or the bare decode when residual is off.
    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let expect = self.cfg.input_shape();
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::Shape {
                expected: expect.to_vec(),
                actual: s,
            });
        }
        let f = self.features(g, images)?;
        let delta = self.decoder.decode(g, f, self.grid())?;
        if self.cfg.residual {
            g.add(images, delta)
        } else {
            Ok(delta)
        }
    }

    /// Defends a batch `[B, C, H, W]`; no clipping.
    pub fn defend_batch(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        use rayon::prelude::*;
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Shape {
                expected: self.cfg.input_shape().to_vec(),
                actual: s.to_vec(),
            });
        }
        let n = s[0];
        let chunk = crate::victims::EVAL_CHUNK;
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        let parts = starts
            .par_iter()
            .map(|&st| {
                let rows: Vec<usize> = (st..(st + chunk).min(n)).collect();
                let mut g = Graph::new();
                let x = g.constant(images.select_axis0(&rows));
                let y = self.forward(&mut g, x)?;
                Ok(g.value(y).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(s.to_vec(), parts.concat())
    }

    /// Defends one `[C, H, W]` image.
    pub fn defend(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let out = self.defend_batch(&x.clone().reshape(&shape)?)?;
        out.reshape(x.shape())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_module("defender", serde_json::json!({ "defender": self.cfg }), self)
    }

    /// Restores a defender with the stored weights and the stored policy.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "defender" {
            return Err(Error::config(format!("checkpoint holds a {}, not a defender", ck.kind)));
        }
        let cfg: DefenderConfig = serde_json::from_value(ck.header["defender"].clone())?;
        let mut m = build_defender(&DefenderConfig {
            zero_init: false,
            init: InitStrategy::Random,
            ..cfg.clone()
        })?;
        ck.apply_to(&mut m)?;
        m.cfg = cfg;
        Ok(m)
    }
}

impl<T: Real> Module<T> for DefenderModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.embedding.visit(f);
        if let Some(n) = &self.embed_norm {
            n.visit(f);
        }
        match &self.processor {
            Processor::Transformer(layers) => layers.iter().for_each(|l| l.visit(f)),
            Processor::Linear(l) => l.visit(f),
            Processor::Ffn(ff) => ff.visit(f),
            Processor::Fd { mix_in, mix_out } => {
                mix_in.visit(f);
                mix_out.visit(f);
            }
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.embedding.visit_mut(f);
        if let Some(n) = &mut self.embed_norm {
            n.visit_mut(f);
        }
        match &mut self.processor {
            Processor::Transformer(layers) => layers.iter_mut().for_each(|l| l.visit_mut(f)),
            Processor::Linear(l) => l.visit_mut(f),
            Processor::Ffn(ff) => ff.visit_mut(f),
            Processor::Fd { mix_in, mix_out } => {
                mix_in.visit_mut(f);
                mix_out.visit_mut(f);
            }
        }
    }
}

impl<T: Real> Defense<T> for DefenderModel<T> {
    fn name(&self) -> String {
        self.cfg.label()
    }

    fn purify(&self, images: &Tensor<T>, _ids: &[u64]) -> Result<Tensor<T>> {
        self.defend_batch(images)
    }
}

/// Partition of a defender built from `cfg`, under `policy`.
pub fn partition_params<T: Real>(d: &DefenderModel<T>, policy: PartitionPolicy) -> Partition {
    d.partition(policy)
}
