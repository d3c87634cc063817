//! Training-free input transformations: random resize-and-pad and additive
//! Gaussian noise. Each example draws from its own stream, keyed by
//! `(seed, example id)`.

use serde::{Deserialize, Serialize};

use crate::defense::Defense;
use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::{Real, Tensor};

/// Standard deviations of the noise sweep.
pub const NOISE_SWEEP: [f64; 3] = [0.05, 0.06, 0.07];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RpConfig {
    /// Smallest resized height; `ceil(0.85 * H)` when absent.
    pub s_min: Option<usize>,
    /// Largest resized height; `H` when absent.
    pub s_max: Option<usize>,
    pub interpolation: Interpolation,
}

impl RpConfig {
    pub fn range(&self, h: usize) -> Result<(usize, usize)> {
        let lo = self.s_min.unwrap_or((0.85 * h as f64).ceil() as usize);
        let hi = self.s_max.unwrap_or(h);
        if lo == 0 || lo > hi || hi > h {
            return Err(Error::config(format!("resize range [{lo}, {hi}] invalid for height {h}")));
        }
        Ok((lo, hi))
    }
}

fn resize<T: Real>(src: &[T], h: usize, w: usize, oh: usize, ow: usize, mode: Interpolation) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow);
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    for y in 0..oh {
        for x in 0..ow {
            let v = match mode {
                Interpolation::Nearest => {
                    let yy = ((y as f64 * sy).floor() as usize).min(h - 1);
                    let xx = ((x as f64 * sx).floor() as usize).min(w - 1);
                    src[yy * w + xx]
                }
                Interpolation::Bilinear => {
                    let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
                    let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (dy, dx) = (T::from_f64(fy - y0 as f64), T::from_f64(fx - x0 as f64));
                    let top = src[y0 * w + x0] * (T::ONE - dx) + src[y0 * w + x1] * dx;
                    let bot = src[y1 * w + x0] * (T::ONE - dx) + src[y1 * w + x1] * dx;
                    top * (T::ONE - dy) + bot * dy
                }
            };
            out.push(v);
        }
    }
    out
}

/// Resizes `[C, H, W]` to a uniformly drawn `s x round(s * W / H)` and
/// zero-pads it back to `H x W` at a uniformly drawn offset.
pub fn rp_defense<T: Real>(x: &Tensor<T>, cfg: &RpConfig, rng: &mut Rng) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::contract(format!("rp_defense wants [C, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (lo, hi) = cfg.range(h)?;
    let sh = lo + rng.below(hi - lo + 1);
    let sw = ((sh as f64 * w as f64 / h as f64).round() as usize).clamp(1, w);
    let top = rng.below(h - sh + 1);
    let left = rng.below(w - sw + 1);
    let mut out = vec![T::ZERO; c * h * w];
    for ch in 0..c {
        let plane = resize(&x.data()[ch * h * w..(ch + 1) * h * w], h, w, sh, sw, cfg.interpolation);
        for y in 0..sh {
            for xx in 0..sw {
                out[ch * h * w + (top + y) * w + left + xx] = plane[y * sw + xx].max(T::ZERO).min(T::ONE);
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// `clip01(x + n)`, `n ~ N(0, std^2)` elementwise.
pub fn gaussian_noise_defense<T: Real>(x: &Tensor<T>, std: f64, rng: &mut Rng) -> Result<Tensor<T>> {
    if std.is_nan() || std < 0.0 {
        return Err(Error::config(format!("noise std {std} must be non-negative")));
    }
    if std == 0.0 {
        return Ok(x.clone());
    }
    let data = x
        .data()
        .iter()
        .map(|&v| (v + rng.normal_real::<T>(std)).max(T::ZERO).min(T::ONE))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn per_example<T: Real>(
    images: &Tensor<T>,
    ids: &[u64],
    seed: u64,
    f: impl Fn(&Tensor<T>, &mut Rng) -> Result<Tensor<T>>,
) -> Result<Tensor<T>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if ids.len() != n {
        return Err(Error::contract(format!("{} ids for {n} images", ids.len())));
    }
    let out = (0..n)
        .map(|i| f(&images.index_axis0(i), &mut Rng::for_example(seed, Stream::BaselineNoise, ids[i])))
        .collect::<Result<Vec<_>>>()?;
    if out.is_empty() {
        return Ok(images.clone());
    }
    Tensor::stack(&out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomResizePad {
    pub cfg: RpConfig,
    pub seed: u64,
}

impl<T: Real> Defense<T> for RandomResizePad {
    fn name(&self) -> String {
        "r&p".into()
    }

    fn purify(&self, images: &Tensor<T>, ids: &[u64]) -> Result<Tensor<T>> {
        per_example(images, ids, self.seed, |x, rng| rp_defense(x, &self.cfg, rng))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub std: f64,
    pub seed: u64,
}

impl<T: Real> Defense<T> for GaussianNoise {
    fn name(&self) -> String {
        format!("noise-{:.2}", self.std)
    }

    fn purify(&self, images: &Tensor<T>, ids: &[u64]) -> Result<Tensor<T>> {
        per_example(images, ids, self.seed, |x, rng| gaussian_noise_defense(x, self.std, rng))
    }
}
