use std::sync::Arc;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// Parameter-free decoder turning one token per patch back into pixels.
///
/// Feature `c*r*r + i*r + j` of the token at grid cell `(gy, gx)` lands on
/// output channel `c`, pixel `(gy*r + i, gx*r + j)`. Features past `C*r*r`
/// are dropped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelShuffleDecoder {
    pub upscale: usize,
    pub out_channels: usize,
}

impl PixelShuffleDecoder {
    pub fn new(upscale: usize, out_channels: usize) -> Self {
        Self { upscale, out_channels }
    }

    pub fn used_features(&self) -> usize {
        self.out_channels * self.upscale * self.upscale
    }

    /// Flat source index into `[B, T, d]` for every element of the
    /// `[B, C, gh*r, gw*r]` output.
    pub fn index(&self, batch: usize, d: usize, grid: (usize, usize)) -> Result<Vec<usize>> {
        let r = self.upscale;
        let c = self.out_channels;
        if d < c * r * r {
            return Err(Error::config(format!(
                "token dim {d} smaller than {c} channels x {r}^2 required by the decoder"
            )));
        }
        let (gh, gw) = grid;
        let (h, w) = (gh * r, gw * r);
        let t = gh * gw;
        let mut idx = Vec::with_capacity(batch * c * h * w);
        for b in 0..batch {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let token = (y / r) * gw + x / r;
                        let feat = ch * r * r + (y % r) * r + x % r;
                        idx.push((b * t + token) * d + feat);
                    }
                }
            }
        }
        Ok(idx)
    }

    /// `[B, T, d]` tokens to `[B, C, gh*r, gw*r]` images.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(Error::contract(format!("decoder wants [B, {}, d], got {s:?}", grid.0 * grid.1)));
        }
        let idx = self.index(s[0], s[2], grid)?;
        let shape = [s[0], self.out_channels, grid.0 * self.upscale, grid.1 * self.upscale];
        g.gather(tokens, Arc::new(idx), &shape)
    }
}
