//! Frozen classifiers under attack: a small vision transformer and an MLP.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::defense::Defense;
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, PatchEmbedding, TransformerConfig, TransformerLayer};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{Rng, Stream};
use crate::tensor::{group, Module, Parameter, Real, Tensor};

/// Rows per forward pass when evaluating many images.
pub const EVAL_CHUNK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VictimKind {
    TinyVit,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimConfig {
    pub kind: VictimKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the MLP victim.
    pub hidden: usize,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            kind: VictimKind::TinyVit,
            channels: 3,
            height: 32,
            width: 32,
            num_classes: 10,
            patch: 8,
            dim: 64,
            depth: 4,
            heads: 4,
            hidden: 256,
        }
    }
}

impl VictimConfig {
    pub fn for_dataset(kind: VictimKind, ds: &Dataset) -> Self {
        let (c, h, w) = ds.geometry();
        Self {
            kind,
            channels: c,
            height: h,
            width: w,
            num_classes: ds.num_classes,
            ..Self::default()
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }
}

/// Something that maps `[B, C, H, W]` images to `[B, K]` logits inside a
/// graph. Attacks and the tuning loop only need this much of a victim.
pub trait Classifier<T: Real>: Sync {
    fn input_shape(&self) -> [usize; 3];
    fn num_classes(&self) -> usize;
    fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var>;
}

impl<T: Real> Classifier<T> for VictimModel<T> {
    fn input_shape(&self) -> [usize; 3] {
        self.cfg.input_shape()
    }
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
    fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        VictimModel::forward(self, g, images)
    }
}

#[derive(Clone, Debug)]
enum Body<T> {
    Vit {
        embed: PatchEmbedding<T>,
        blocks: Vec<TransformerLayer<T>>,
        norm: LayerNorm<T>,
    },
    Mlp {
        fc1: Linear<T>,
        fc2: Linear<T>,
    },
}

#[derive(Clone, Debug)]
pub struct VictimModel<T> {
    pub cfg: VictimConfig,
    body: Body<T>,
    head: Linear<T>,
    frozen: bool,
}

impl<T: Real> VictimModel<T> {
    pub fn new(cfg: &VictimConfig, seed: u64) -> Result<Self> {
        if cfg.num_classes < 2 {
            return Err(Error::config("a classifier needs at least two classes"));
        }
        let mut rng = Rng::new(seed, Stream::Init);
        let (body, feat) = match cfg.kind {
            VictimKind::TinyVit => {
                let embed = PatchEmbedding::new("embed", cfg.channels, (cfg.height, cfg.width), cfg.patch, cfg.dim, &mut rng)?;
                let tc = TransformerConfig::new(cfg.dim, cfg.heads);
                let blocks = (0..cfg.depth)
                    .map(|i| TransformerLayer::new(&format!("blocks.{i}"), &tc, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let norm = LayerNorm::new("norm", cfg.dim);
                (Body::Vit { embed, blocks, norm }, cfg.dim)
            }
            VictimKind::Mlp => {
                let inp = cfg.channels * cfg.height * cfg.width;
                let fc1 = Linear::new("fc1", group::LINEAR, inp, cfg.hidden, true, &mut rng);
                let fc2 = Linear::new("fc2", group::LINEAR, cfg.hidden, cfg.hidden, true, &mut rng);
                (Body::Mlp { fc1, fc2 }, cfg.hidden)
            }
        };
        let head = Linear::new("head", group::HEAD, feat, cfg.num_classes, true, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            body,
            head,
            frozen: false,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Frozen and no parameter has been made trainable since.
    pub fn is_frozen(&self) -> bool {
        let mut trainable = false;
        self.visit(&mut |p| trainable |= p.trainable);
        self.frozen && !trainable
    }

    /// Marks every parameter non-trainable; the deployed state.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
        self.frozen = true;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let expect = self.cfg.input_shape();
        if shape.len() != 4 || shape[1..] != expect {
            return Err(Error::Shape {
                expected: expect.to_vec(),
                actual: shape.to_vec(),
            });
        }
        Ok(())
    }

    /// `[B, C, H, W]` to logits `[B, K]`.
    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        self.check_input(&s)?;
        let feat = match &self.body {
            Body::Vit { embed, blocks, norm } => {
                let mut x = embed.forward(g, images)?;
                for b in blocks {
                    x = b.forward(g, x)?;
                }
                let x = norm.forward(g, x)?;
                g.mean_tokens(x)?
            }
            Body::Mlp { fc1, fc2 } => {
                let flat = g.reshape(images, &[s[0], s[1] * s[2] * s[3]])?;
                let h = fc1.forward(g, flat)?;
                let h = g.relu(h);
                let h = fc2.forward(g, h)?;
                g.relu(h)
            }
        };
        self.head.forward(g, feat)
    }

    /// Logits for a batch of images, evaluated in independent chunks.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let n = images.shape()[0];
        let k = self.num_classes();
        let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
        let parts = starts
            .par_iter()
            .map(|&s| {
                let rows: Vec<usize> = (s..(s + EVAL_CHUNK).min(n)).collect();
                let mut g = Graph::new();
                let x = g.constant(images.select_axis0(&rows));
                let out = self.forward(&mut g, x)?;
                Ok(g.value(out).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::new(vec![n, k], parts.concat())
    }

    /// Label and logits of one `[C, H, W]` image.
    pub fn predict(&self, x: &Tensor<T>) -> Result<(usize, Vec<T>)> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let logits = self.logits(&x.clone().reshape(&shape)?)?.into_data();
        Ok((argmax(&logits), logits))
    }

    pub fn predict_batch(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.logits(images)?;
        Ok(logits.data().chunks_exact(self.num_classes()).map(argmax).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = serde_json::json!({ "victim": self.cfg, "frozen": self.frozen });
        Checkpoint::from_module("victim", header, self)
    }

    /// Rebuilds a victim from a checkpoint; the result is frozen.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "victim" {
            return Err(Error::config(format!("checkpoint holds a {}, not a victim", ck.kind)));
        }
        let cfg: VictimConfig = serde_json::from_value(ck.header["victim"].clone())?;
        let mut m = Self::new(&cfg, 0)?;
        ck.apply_to(&mut m)?;
        m.freeze();
        Ok(m)
    }
}

impl<T: Real> Module<T> for VictimModel<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        match &self.body {
            Body::Vit { embed, blocks, norm } => {
                embed.visit(f);
                blocks.iter().for_each(|b| b.visit(f));
                norm.visit(f);
            }
            Body::Mlp { fc1, fc2 } => {
                fc1.visit(f);
                fc2.visit(f);
            }
        }
        self.head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        match &mut self.body {
            Body::Vit { embed, blocks, norm } => {
                embed.visit_mut(f);
                blocks.iter_mut().for_each(|b| b.visit_mut(f));
                norm.visit_mut(f);
            }
            Body::Mlp { fc1, fc2 } => {
                fc1.visit_mut(f);
                fc2.visit_mut(f);
            }
        }
        self.head.visit_mut(f);
    }
}

/// First index of the maximum.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of `images` classified as `labels`, routed through `defense`
/// when given. `ids` default to `0..N`.
pub fn accuracy<T: Real>(
    victim: &VictimModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    defense: Option<&dyn Defense<T>>,
    ids: Option<&[u64]>,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty subset"));
    }
    if images.shape().first() != Some(&labels.len()) {
        return Err(Error::contract(format!(
            "{} labels for images of shape {:?}",
            labels.len(),
            images.shape()
        )));
    }
    let preds = match defense {
        None => victim.predict_batch(images)?,
        Some(d) => {
            let default_ids: Vec<u64>;
            let ids = match ids {
                Some(ids) => ids,
                None => {
                    default_ids = (0..labels.len() as u64).collect();
                    &default_ids
                }
            };
            victim.predict_batch(&d.purify(images, ids)?)?
        }
    };
    let correct = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate to zero over `epochs`.
    pub cosine: bool,
    /// Random translation of each training image by up to this many pixels
    /// per axis, zero-filled.
    pub shift: usize,
    /// Share of the training set held out for validation.
    pub val_fraction: f64,
    /// Held-out accuracy below which training is reported as failed.
    pub floor: f64,
    /// Stop as soon as held-out accuracy reaches this.
    pub target: Option<f64>,
    pub seed: u64,
}

impl Default for VictimTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
            cosine: true,
            shift: 0,
            val_fraction: 0.1,
            floor: 0.9,
            target: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VictimEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VictimReport {
    pub history: Vec<VictimEpoch>,
    pub best_epoch: usize,
    pub val_acc: f64,
}

pub fn train_victim<T: Real>(train: &Dataset, cfg: &VictimConfig, tc: &VictimTrainConfig) -> Result<(VictimModel<T>, VictimReport)> {
    train_victim_with(train, cfg, tc, |_| {})
}

/// Adam on cross entropy over a seeded train/validation split. Keeps the
/// parameters of the best validation epoch and freezes them.
pub fn train_victim_with<T: Real>(
    train: &Dataset,
    cfg: &VictimConfig,
    tc: &VictimTrainConfig,
    mut progress: impl FnMut(&VictimEpoch),
) -> Result<(VictimModel<T>, VictimReport)> {
    if tc.epochs == 0 {
        return Err(Error::Training("zero-epoch budget".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let (c, h, w) = train.geometry();
    if [c, h, w] != cfg.input_shape() || train.num_classes != cfg.num_classes {
        return Err(Error::config("victim config does not match the dataset geometry"));
    }
    let mut order = Rng::new(tc.seed, Stream::Data).permutation(train.len());
    let n_val = ((train.len() as f64 * tc.val_fraction).round() as usize).clamp(1, train.len() - 1);
    let val_idx = order.split_off(train.len() - n_val);
    let mut fit_idx = order;
    let val_images: Tensor<T> = train.images.select_axis0(&val_idx).cast();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| train.labels[i]).collect();

    let mut model = VictimModel::<T>::new(cfg, tc.seed)?;
    let mut adam = Adam::new(tc.adam);
    let mut shuffle = Rng::new(tc.seed, Stream::Batching);
    let mut report = VictimReport::default();
    let mut best = model.snapshot();
    for epoch in 0..tc.epochs {
        if tc.cosine {
            let frac = epoch as f64 / tc.epochs as f64;
            adam.cfg.lr = tc.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        }
        shuffle.shuffle(&mut fit_idx);
        let mut total = 0.0;
        for batch in fit_idx.chunks(tc.batch_size) {
            let mut g = Graph::new();
            let mut xb: Tensor<T> = train.images.select_axis0(batch).cast();
            if tc.shift > 0 {
                shift_images(&mut xb, tc.shift, &mut shuffle);
            }
            let x = g.constant(xb);
            let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let logits = model.forward(&mut g, x)?;
            let loss = g.cross_entropy(logits, &labels)?;
            let lv = g.value(loss).item().to_f64();
            if !lv.is_finite() {
                return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
            }
            total += lv * batch.len() as f64;
            let grads = g.backward(loss)?.into_params();
            adam.step(&mut model, &grads);
        }
        let val_acc = accuracy(&model, &val_images, &val_labels, None, None)?;
        let row = VictimEpoch {
            epoch,
            loss: total / fit_idx.len() as f64,
            val_acc,
        };
        progress(&row);
        report.history.push(row);
        if val_acc > report.val_acc || epoch == 0 {
            report.val_acc = val_acc;
            report.best_epoch = epoch;
            best = model.snapshot();
        }
        if tc.target.is_some_and(|t| val_acc >= t) {
            break;
        }
    }
    if report.val_acc < tc.floor {
        return Err(Error::Training(format!(
            "held-out accuracy {:.4} below floor {:.4}",
            report.val_acc, tc.floor
        )));
    }
    restore(&mut model, &best);
    model.freeze();
    Ok((model, report))
}

fn shift_images<T: Real>(x: &mut Tensor<T>, max: usize, rng: &mut Rng) {
    let s = x.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let span = 2 * max + 1;
    for img in x.data_mut().chunks_exact_mut(c * h * w) {
        let dy = rng.below(span) as isize - max as isize;
        let dx = rng.below(span) as isize - max as isize;
        let src = img.to_vec();
        for ch in 0..c {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let (sy, sx) = (y - dy, xx - dx);
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        src[ch * h * w + sy as usize * w + sx as usize]
                    } else {
                        T::ZERO
                    };
                    img[ch * h * w + y as usize * w + xx as usize] = v;
                }
            }
        }
    }
}

pub(crate) fn restore<T: Real>(m: &mut impl Module<T>, snap: &[(String, Tensor<T>)]) {
    let mut it = snap.iter();
    m.visit_mut(&mut |p| {
        let (name, t) = it.next().expect("snapshot of the same model");
        debug_assert_eq!(name, &p.name);
        p.tensor = t.clone();
    });
}
