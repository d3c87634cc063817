//! Proxy pretraining: masked-patch reconstruction through the residual
//! defender, standing in for a pretrained encoder checkpoint.

use serde::{Deserialize, Serialize};

use super::{DefenderConfig, DefenderModel};
use crate::autodiff::Graph;
use crate::data::{gen_textures, Dataset};
use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{Rng, Stream};
use crate::tensor::{Module, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProxyDomain {
    /// Held-out images of the victim's own domain.
    Same,
    /// Procedural textures unrelated to any task.
    Foreign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Share of patches zeroed in every input.
    pub mask_ratio: f64,
    /// Size of a generated (foreign) corpus.
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 32,
            lr: 1e-3,
            mask_ratio: 0.5,
            corpus_size: 512,
            seed: 7,
        }
    }
}

pub fn proxy_corpus(domain: ProxyDomain, cfg: &DefenderConfig, pc: &PretrainConfig, same_domain: Option<&Dataset>) -> Result<Dataset> {
    match domain {
        ProxyDomain::Same => same_domain
            .cloned()
            .ok_or_else(|| Error::config("same-domain pretraining needs a held-out corpus")),
        ProxyDomain::Foreign => gen_textures(pc.corpus_size, cfg.channels, cfg.height, cfg.width, pc.seed),
    }
}

/// Trains every defender parameter to reconstruct `x` from a copy with
/// `mask_ratio` of its patches zeroed, minimizing the mean squared error of
/// `defend(masked) - x`, then restores the partition policy. Returns the
/// loss of every step.
pub fn proxy_pretrain<T: Real>(d: &mut DefenderModel<T>, corpus: &Dataset, pc: &PretrainConfig) -> Result<Vec<f64>> {
    if pc.steps == 0 {
        return Ok(Vec::new());
    }
    let [c, h, w] = d.cfg.input_shape();
    if corpus.geometry() != (c, h, w) {
        return Err(Error::config("proxy corpus geometry differs from the defender input"));
    }
    if corpus.is_empty() || pc.batch_size == 0 {
        return Err(Error::config("proxy pretraining needs a non-empty corpus and batch"));
    }
    let p = d.cfg.patch;
    let (gh, gw) = d.grid();
    let tokens = gh * gw;
    let masked = ((tokens as f64 * pc.mask_ratio).round() as usize).min(tokens);
    let mut rng = Rng::new(pc.seed, Stream::Pretrain);
    let mut adam = Adam::new(AdamConfig {
        lr: pc.lr,
        ..AdamConfig::default()
    });
    d.set_trainable(true);
    let mut trace = Vec::with_capacity(pc.steps);
    for _ in 0..pc.steps {
        let idx: Vec<usize> = (0..pc.batch_size).map(|_| rng.below(corpus.len())).collect();
        let clean: Tensor<T> = corpus.images.select_axis0(&idx).cast();
        let mut input = clean.clone();
        for img in input.data_mut().chunks_exact_mut(c * h * w) {
            let perm = rng.permutation(tokens);
            for &t in &perm[..masked] {
                let (ty, tx) = (t / gw, t % gw);
                for ch in 0..c {
                    for y in ty * p..(ty + 1) * p {
                        img[ch * h * w + y * w + tx * p..ch * h * w + y * w + (tx + 1) * p].fill(T::ZERO);
                    }
                }
            }
        }
        let mut g = Graph::new();
        let x = g.constant(input);
        let target = g.constant(clean);
        let out = d.forward(&mut g, x)?;
        let diff = g.sub(out, target)?;
        let sq = g.mul(diff, diff)?;
        let loss = g.mean(sq);
        let lv = g.value(loss).item().to_f64();
        if !lv.is_finite() {
            d.apply_policy();
            return Err(Error::Training("non-finite reconstruction loss".into()));
        }
        trace.push(lv);
        let grads = g.backward(loss)?.into_params();
        adam.step(d, &grads);
    }
    d.apply_policy();
    Ok(trace)
}
