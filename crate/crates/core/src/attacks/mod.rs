//! Evasion attacks on a frozen classifier: FGSM, PGD and a simplified
//! Auto-PGD, under an L-infinity or L2 budget.
//!
//! Batches are split into fixed chunks of [`ATTACK_CHUNK`] examples that run
//! independently (in parallel when a thread pool is available), so results
//! do not depend on the thread count.

mod corpus;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use corpus::AdversarialCorpus;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::{Real, Tensor};
use crate::victims::{argmax, Classifier};

pub const ATTACK_CHUNK: usize = 64;

/// Floor of the gradient norm in L2 steps.
pub const L2_GRAD_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fgsm,
    Pgd,
    Apgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `epsilon / 4`.
    pub step_size: Option<f64>,
    pub variant: Variant,
    pub random_start: bool,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self::linf()
    }
}

impl AttackConfig {
    pub fn linf() -> Self {
        Self {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: None,
            variant: Variant::Pgd,
            random_start: false,
            seed: 0,
        }
    }

    pub fn l2() -> Self {
        Self {
            norm: Norm::L2,
            epsilon: 128.0 / 255.0,
            ..Self::linf()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    /// Short tag such as `pgd-linf`.
    pub fn label(&self) -> String {
        let v = match self.variant {
            Variant::Fgsm => "fgsm",
            Variant::Pgd => "pgd",
            Variant::Apgd => "apgd",
        };
        let n = match self.norm {
            Norm::Linf => "linf",
            Norm::L2 => "l2",
        };
        format!("{v}-{n}")
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::config(format!("epsilon {} outside [0, 1]", self.epsilon)));
        }
        if !(self.alpha() >= 0.0 && self.alpha().is_finite()) {
            return Err(Error::config(format!("step size {} must be finite and non-negative", self.alpha())));
        }
        if self.variant == Variant::Fgsm && self.norm != Norm::Linf {
            return Err(Error::config("fgsm is an L-infinity attack"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialExample<T> {
    /// Perturbed image `[C, H, W]`.
    pub x_a: Tensor<T>,
    pub origin: usize,
    pub label: usize,
    /// Victim prediction on `x_a`.
    pub prediction: usize,
    /// Measured norm of `x_a - x` in the attack's norm.
    pub distortion: f64,
    /// The loss gradient was identically zero at the start.
    pub zero_gradient: bool,
}

impl<T: Real> AdversarialExample<T> {
    pub fn succeeded(&self) -> bool {
        self.prediction != self.label
    }
}

/// Norm of `a - b` over the whole slice.
pub fn distortion<T: Real>(a: &[T], b: &[T], norm: Norm) -> f64 {
    let diffs = a.iter().zip(b).map(|(x, y)| (x.to_f64() - y.to_f64()).abs());
    match norm {
        Norm::Linf => diffs.fold(0.0, f64::max),
        Norm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
    }
}

fn project_slice<T: Real>(v: &mut [T], center: &[T], norm: Norm, eps: T) {
    match norm {
        Norm::Linf => {
            for (x, &c) in v.iter_mut().zip(center) {
                *x = x.max(c - eps).min(c + eps);
            }
        }
        Norm::L2 => {
            let n = v
                .iter()
                .zip(center)
                .map(|(&x, &c)| ((x - c) * (x - c)).to_f64())
                .sum::<f64>()
                .sqrt();
            if n > eps.to_f64() {
                let s = T::from_f64(eps.to_f64() / n);
                for (x, &c) in v.iter_mut().zip(center) {
                    *x = c + (*x - c) * s;
                }
            }
        }
    }
}

fn clip01<T: Real>(v: &mut [T]) {
    for x in v {
        *x = x.max(T::ZERO).min(T::ONE);
    }
}

/// Projects `v` onto the `norm` ball of radius `eps` around `center`. No box
/// clipping.
pub fn project<T: Real>(v: &Tensor<T>, center: &Tensor<T>, norm: Norm, eps: f64) -> Result<Tensor<T>> {
    if v.shape() != center.shape() {
        return Err(Error::Shape {
            expected: center.shape().to_vec(),
            actual: v.shape().to_vec(),
        });
    }
    let mut out = v.clone();
    project_slice(out.data_mut(), center.data(), norm, T::from_f64(eps));
    Ok(out)
}

fn step_direction<T: Real>(g: &[T], norm: Norm) -> Vec<T> {
    match norm {
        Norm::Linf => g.iter().map(|v| v.signum0()).collect(),
        Norm::L2 => {
            let n = g.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            let s = T::from_f64(1.0 / n.max(L2_GRAD_FLOOR));
            g.iter().map(|&v| v * s).collect()
        }
    }
}

/// Per-example cross-entropy and the input gradient of their sum.
fn loss_and_grad<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(Vec<f64>, Tensor<T>)> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let logits = m.forward(&mut g, xv)?;
    let k = m.num_classes();
    let losses = g
        .value(logits)
        .data()
        .chunks_exact(k)
        .zip(labels)
        .map(|(row, &y)| {
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.to_f64()));
            let lse = mx + row.iter().map(|v| (v.to_f64() - mx).exp()).sum::<f64>().ln();
            lse - row[y].to_f64()
        })
        .collect();
    let ce = g.cross_entropy(logits, labels)?;
    let total = g.scale(ce, T::from_f64(labels.len() as f64));
    let grads = g.backward(total)?;
    let grad = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((losses, grad))
}

fn predictions<T: Real, C: Classifier<T> + ?Sized>(m: &C, x: &Tensor<T>) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let logits = m.forward(&mut g, xv)?;
    Ok(g.value(logits).data().chunks_exact(m.num_classes()).map(argmax).collect())
}

fn check_batch<T: Real>(m: &(impl Classifier<T> + ?Sized), x: &Tensor<T>, labels: &[usize], origins: &[usize]) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != m.input_shape() {
        return Err(Error::Shape {
            expected: m.input_shape().to_vec(),
            actual: s.to_vec(),
        });
    }
    if labels.len() != s[0] || origins.len() != s[0] {
        return Err(Error::contract("one label and one origin per image"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= m.num_classes()) {
        return Err(Error::contract(format!("label {y} out of range")));
    }
    Ok(())
}

/// Runs `cfg.variant` over a batch `[B, C, H, W]`. `origins` are dataset
/// indices, recorded in the output and used to seed random starts.
pub fn attack<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    labels: &[usize],
    origins: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialExample<T>>> {
    cfg.validate()?;
    check_batch(m, x, labels, origins)?;
    let n = labels.len();
    let starts: Vec<usize> = (0..n).step_by(ATTACK_CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&s| {
            let rows: Vec<usize> = (s..(s + ATTACK_CHUNK).min(n)).collect();
            let xb = x.select_axis0(&rows);
            let yb: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let ob: Vec<usize> = rows.iter().map(|&i| origins[i]).collect();
            let (xa, zero) = match cfg.variant {
                Variant::Fgsm => fgsm_chunk(m, &xb, &yb, cfg)?,
                Variant::Pgd => pgd_chunk(m, &xb, &yb, &ob, cfg)?,
                Variant::Apgd => apgd_chunk(m, &xb, &yb, &ob, cfg)?,
            };
            finish(m, &xb, xa, &yb, &ob, &zero, cfg.norm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

fn finish<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    xa: Tensor<T>,
    labels: &[usize],
    origins: &[usize],
    zero: &[bool],
    norm: Norm,
) -> Result<Vec<AdversarialExample<T>>> {
    let preds = predictions(m, &xa)?;
    Ok((0..labels.len())
        .map(|i| {
            let a = xa.index_axis0(i);
            let distortion = distortion(a.data(), x.index_axis0(i).data(), norm);
            AdversarialExample {
                x_a: a,
                origin: origins[i],
                label: labels[i],
                prediction: preds[i],
                distortion,
                zero_gradient: zero[i],
            }
        })
        .collect())
}

fn random_start<T: Real>(x: &mut [T], center: &[T], origin: usize, cfg: &AttackConfig) {
    let mut rng = Rng::for_example(cfg.seed, Stream::AttackNoise, origin as u64);
    match cfg.norm {
        Norm::Linf => {
            for v in x.iter_mut() {
                *v += T::from_f64(rng.uniform_range(-cfg.epsilon, cfg.epsilon));
            }
        }
        Norm::L2 => {
            let dir: Vec<f64> = (0..x.len()).map(|_| rng.normal()).collect();
            let n = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(L2_GRAD_FLOOR);
            let r = cfg.epsilon * rng.uniform().powf(1.0 / x.len() as f64);
            for (v, d) in x.iter_mut().zip(dir) {
                *v += T::from_f64(r * d / n);
            }
        }
    }
    project_slice(x, center, cfg.norm, T::from_f64(cfg.epsilon));
    clip01(x);
}

fn is_zero<T: Real>(g: &[T]) -> bool {
    g.iter().all(|&v| v == T::ZERO)
}

/// `clip01(x + eps * sign(grad))`.
fn fgsm_chunk<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let (_, grad) = loss_and_grad(m, x, labels)?;
    let per = x.len() / labels.len();
    let eps = T::from_f64(cfg.epsilon);
    let mut out = x.clone();
    let mut zero = Vec::with_capacity(labels.len());
    for (o, g) in out.data_mut().chunks_exact_mut(per).zip(grad.data().chunks_exact(per)) {
        zero.push(is_zero(g));
        for (v, &gi) in o.iter_mut().zip(g) {
            *v += eps * gi.signum0();
        }
        clip01(o);
    }
    Ok((out, zero))
}

fn pgd_chunk<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    labels: &[usize],
    origins: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let per = x.len() / labels.len();
    let eps = T::from_f64(cfg.epsilon);
    let alpha = T::from_f64(cfg.alpha());
    let mut cur = x.clone();
    if cfg.random_start {
        for (i, (v, c)) in cur.data_mut().chunks_exact_mut(per).zip(x.data().chunks_exact(per)).enumerate() {
            random_start(v, c, origins[i], cfg);
        }
    }
    let mut zero = vec![false; labels.len()];
    for step in 0..cfg.steps {
        let (_, grad) = loss_and_grad(m, &cur, labels)?;
        let chunks = cur
            .data_mut()
            .chunks_exact_mut(per)
            .zip(grad.data().chunks_exact(per))
            .zip(x.data().chunks_exact(per));
        for (i, ((v, g), c)) in chunks.enumerate() {
            if step == 0 {
                zero[i] = is_zero(g);
            }
            let d = step_direction(g, cfg.norm);
            for (vi, di) in v.iter_mut().zip(d) {
                *vi += alpha * di;
            }
            project_slice(v, c, cfg.norm, eps);
            clip01(v);
        }
    }
    Ok((cur, zero))
}

/// Checkpoint iterations of the step-size schedule: fractions
/// `p0 = 0, p1 = 0.22, p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06)`
/// of the budget, rounded up.
pub fn apgd_checkpoints(steps: usize) -> Vec<usize> {
    let mut p = vec![0.0f64, 0.22];
    while *p.last().expect("nonempty") < 1.0 {
        let j = p.len() - 1;
        p.push(p[j] + (p[j] - p[j - 1] - 0.03).max(0.06));
    }
    let mut w: Vec<usize> = p
        .iter()
        .map(|f| (f * steps as f64 - 1e-9).ceil() as usize)
        .filter(|&w| w > 0 && w < steps)
        .collect();
    w.dedup();
    w
}

/// Share of steps in a checkpoint interval that must raise the loss for the
/// step size to be kept.
pub const APGD_RHO: f64 = 0.75;
pub const APGD_MOMENTUM: f64 = 0.75;

/// Momentum PGD starting at step size `2 * eps`. At each checkpoint an
/// example whose loss rose on fewer than `APGD_RHO` of the interval's steps
/// halves its step size and restarts from its best iterate. Returns the
/// best-loss iterate among `x_1 .. x_steps`.
fn apgd_chunk<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    labels: &[usize],
    origins: &[usize],
    cfg: &AttackConfig,
) -> Result<(Tensor<T>, Vec<bool>)> {
    let b = labels.len();
    let per = x.len() / b;
    let eps = T::from_f64(cfg.epsilon);
    let mu = T::from_f64(APGD_MOMENTUM);
    if cfg.steps == 0 {
        return Ok((x.clone(), vec![false; b]));
    }
    let mut cur = x.clone();
    if cfg.random_start {
        for (i, (v, c)) in cur.data_mut().chunks_exact_mut(per).zip(x.data().chunks_exact(per)).enumerate() {
            random_start(v, c, origins[i], cfg);
        }
    }
    let (mut loss, mut grad) = loss_and_grad(m, &cur, labels)?;
    let zero: Vec<bool> = grad.data().chunks_exact(per).map(is_zero).collect();
    let mut alpha = vec![2.0 * cfg.epsilon; b];
    let mut prev = cur.clone();
    let mut best = cur.clone();
    let mut best_grad = grad.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; b];
    let mut rises = vec![0usize; b];
    let checkpoints = apgd_checkpoints(cfg.steps);
    let mut last_check = 0usize;

    for k in 0..cfg.steps {
        let mut next = cur.clone();
        for i in 0..b {
            let r = i * per..(i + 1) * per;
            let c = &x.data()[r.clone()];
            let xk = &cur.data()[r.clone()];
            let d = step_direction(&grad.data()[r.clone()], cfg.norm);
            let a = T::from_f64(alpha[i]);
            let mut z: Vec<T> = xk.iter().zip(d).map(|(&v, di)| v + a * di).collect();
            project_slice(&mut z, c, cfg.norm, eps);
            clip01(&mut z);
            let out = &mut next.data_mut()[r.clone()];
            if k == 0 {
                out.copy_from_slice(&z);
            } else {
                let xp = &prev.data()[r];
                for j in 0..per {
                    out[j] = xk[j] + mu * (z[j] - xk[j]) + (T::ONE - mu) * (xk[j] - xp[j]);
                }
                project_slice(out, c, cfg.norm, eps);
                clip01(out);
            }
        }
        let (new_loss, new_grad) = loss_and_grad(m, &next, labels)?;
        prev = std::mem::replace(&mut cur, next);
        grad = new_grad;
        for i in 0..b {
            if new_loss[i] > loss[i] {
                rises[i] += 1;
            }
            if new_loss[i] > best_loss[i] {
                best_loss[i] = new_loss[i];
                let r = i * per..(i + 1) * per;
                best.data_mut()[r.clone()].copy_from_slice(&cur.data()[r.clone()]);
                best_grad.data_mut()[r.clone()].copy_from_slice(&grad.data()[r]);
            }
        }
        loss = new_loss;
        let done = k + 1;
        if checkpoints.contains(&done) {
            let span = (done - last_check) as f64;
            for i in 0..b {
                if (rises[i] as f64) < APGD_RHO * span {
                    alpha[i] /= 2.0;
                    let r = i * per..(i + 1) * per;
                    cur.data_mut()[r.clone()].copy_from_slice(&best.data()[r.clone()]);
                    prev.data_mut()[r.clone()].copy_from_slice(&best.data()[r.clone()]);
                    grad.data_mut()[r.clone()].copy_from_slice(&best_grad.data()[r]);
                    loss[i] = best_loss[i];
                }
                rises[i] = 0;
            }
            last_check = done;
        }
    }
    Ok((best, zero))
}

pub fn fgsm<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    labels: &[usize],
    origins: &[usize],
    epsilon: f64,
) -> Result<Vec<AdversarialExample<T>>> {
    let cfg = AttackConfig {
        epsilon,
        variant: Variant::Fgsm,
        ..AttackConfig::linf()
    };
    attack(m, x, labels, origins, &cfg)
}

pub fn pgd<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    labels: &[usize],
    origins: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialExample<T>>> {
    attack(m, x, labels, origins, &AttackConfig { variant: Variant::Pgd, ..cfg.clone() })
}

pub fn apgd<T: Real, C: Classifier<T> + ?Sized>(
    m: &C,
    x: &Tensor<T>,
    labels: &[usize],
    origins: &[usize],
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialExample<T>>> {
    attack(m, x, labels, origins, &AttackConfig { variant: Variant::Apgd, ..cfg.clone() })
}

/// Stacks the perturbed images of `examples` into `[B, C, H, W]`.
pub fn stack_examples<T: Real>(examples: &[AdversarialExample<T>]) -> Result<Tensor<T>> {
    Tensor::stack(&examples.iter().map(|e| e.x_a.clone()).collect::<Vec<_>>())
}
