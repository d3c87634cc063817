use std::sync::Arc;

use super::Linear;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{group, Module, Parameter, Real, Tensor};

/// Flat source index, into a `[B, C, H, W]` batch, of every element of the
/// `[B, T, C*p*p]` patch sequence. Patches run row-major over the grid;
/// inside a patch the feature index is `c*p*p + i*p + j`.
pub fn patch_index(batch: usize, c: usize, h: usize, w: usize, p: usize) -> Result<Vec<usize>> {
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("image {h}x{w} not divisible by patch size {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut idx = Vec::with_capacity(batch * c * h * w);
    for b in 0..batch {
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for i in 0..p {
                        for j in 0..p {
                            idx.push(((b * c + ch) * h + gy * p + i) * w + gx * p + j);
                        }
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Non-overlapping patch projection plus learned position embedding.
#[derive(Clone, Debug)]
pub struct PatchEmbedding<T> {
    pub patch: usize,
    pub in_channels: usize,
    pub image: (usize, usize),
    pub proj: Linear<T>,
    pub pos: Parameter<T>,
}

impl<T: Real> PatchEmbedding<T> {
    pub fn new(
        name: &str,
        in_channels: usize,
        image: (usize, usize),
        patch: usize,
        dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if patch == 0 || image.0 % patch != 0 || image.1 % patch != 0 {
            return Err(Error::config(format!(
                "image {}x{} not divisible by patch size {patch}",
                image.0, image.1
            )));
        }
        let tokens = (image.0 / patch) * (image.1 / patch);
        let proj = Linear::new(&format!("{name}.proj"), group::EMBEDDING, in_channels * patch * patch, dim, true, rng);
        let pos = (0..tokens * dim).map(|_| rng.normal_real(0.02)).collect();
        Ok(Self {
            patch,
            in_channels,
            image,
            proj,
            pos: Parameter::new(format!("{name}.pos"), group::EMBEDDING, Tensor::new(vec![tokens, dim], pos)?),
        })
    }

    pub fn dim(&self) -> usize {
        self.proj.fan_out()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image.0 / self.patch, self.image.1 / self.patch)
    }

    pub fn tokens(&self) -> usize {
        let (a, b) = self.grid();
        a * b
    }

    /// `[B, C, H, W]` images to `[B, T, d]` tokens.
    pub fn forward(&self, g: &mut Graph<T>, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let expect = [self.in_channels, self.image.0, self.image.1];
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::Shape {
                expected: expect.to_vec(),
                actual: s,
            });
        }
        let b = s[0];
        let p = self.patch;
        let feat = self.in_channels * p * p;
        let idx = patch_index(b, self.in_channels, self.image.0, self.image.1, p)?;
        let patches = g.gather(images, Arc::new(idx), &[b, self.tokens(), feat])?;
        let x = self.proj.forward(g, patches)?;
        // position embedding broadcast over the batch
        let pos = g.param(&self.pos);
        let t = self.tokens();
        let d = self.dim();
        let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..t * d).collect();
        let pos_b = g.gather(pos, Arc::new(pos_idx), &[b, t, d])?;
        g.add(x, pos_b)
    }
}

impl<T: Real> Module<T> for PatchEmbedding<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.proj.visit(f);
        f(&self.pos);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.proj.visit_mut(f);
        f(&mut self.pos);
    }
}
