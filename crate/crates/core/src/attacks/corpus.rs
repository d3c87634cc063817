//! Adversarial corpus file:
//!
//! ```text
//! magic     8 bytes  "PLUGADV\0"
//! version   u32      1
//! manifest  u32 length + UTF-8 JSON {attack, victim_checksum, seed, shape}
//! count     u32
//! count x { origin: u64, label: u32, prediction: u32, distortion: f64,
//!           zero_gradient: u8, pixels: f32 x C*H*W }
//! ```
//!
//! All integers and floats little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdversarialExample, AttackConfig};
use crate::checkpoint::{put_str, Reader};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const CORPUS_MAGIC: &[u8; 8] = b"PLUGADV\0";
const CORPUS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    attack: AttackConfig,
    victim_checksum: String,
    seed: u64,
    shape: [usize; 3],
}

/// Adversarial examples generated once against one victim.
#[derive(Clone, Debug, PartialEq)]
pub struct AdversarialCorpus<T> {
    pub attack: AttackConfig,
    pub victim_checksum: String,
    pub seed: u64,
    pub shape: [usize; 3],
    pub examples: Vec<AdversarialExample<T>>,
}

impl<T: Real> AdversarialCorpus<T> {
    pub fn images(&self) -> Result<Tensor<T>> {
        super::stack_examples(&self.examples)
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    pub fn origins(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.origin).collect()
    }

    /// Share of examples the bare victim still classifies correctly.
    pub fn victim_accuracy(&self) -> f64 {
        if self.examples.is_empty() {
            return 0.0;
        }
        self.examples.iter().filter(|e| !e.succeeded()).count() as f64 / self.examples.len() as f64
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            attack: self.attack.clone(),
            victim_checksum: self.victim_checksum.clone(),
            seed: self.seed,
            shape: self.shape,
        };
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        out.extend_from_slice(&CORPUS_VERSION.to_le_bytes());
        put_str(&mut out, &serde_json::to_string(&manifest)?);
        out.extend_from_slice(&(self.examples.len() as u32).to_le_bytes());
        let per: usize = self.shape.iter().product();
        for e in &self.examples {
            if e.x_a.len() != per {
                return Err(Error::Shape {
                    expected: self.shape.to_vec(),
                    actual: e.x_a.shape().to_vec(),
                });
            }
            out.extend_from_slice(&(e.origin as u64).to_le_bytes());
            out.extend_from_slice(&(e.label as u32).to_le_bytes());
            out.extend_from_slice(&(e.prediction as u32).to_le_bytes());
            out.extend_from_slice(&e.distortion.to_le_bytes());
            out.push(e.zero_gradient as u8);
            for v in e.x_a.data() {
                out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CORPUS_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "not an adversarial corpus".into(),
            });
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(Error::Parse {
                offset: 8,
                msg: format!("unsupported version {version}"),
            });
        }
        let at = r.pos;
        let m: Manifest = serde_json::from_str(&r.string()?).map_err(|e| Error::Parse {
            offset: at,
            msg: e.to_string(),
        })?;
        let count = r.u32()? as usize;
        let per: usize = m.shape.iter().product();
        let mut examples = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let origin = r.u64()? as usize;
            let label = r.u32()? as usize;
            let prediction = r.u32()? as usize;
            let distortion = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
            let zero_gradient = r.take(1)?[0] != 0;
            let data = r
                .take(per * 4)?
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            examples.push(AdversarialExample {
                x_a: Tensor::new(m.shape.to_vec(), data)?,
                origin,
                label,
                prediction,
                distortion,
                zero_gradient,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                msg: "trailing bytes".into(),
            });
        }
        Ok(Self {
            attack: m.attack,
            victim_checksum: m.victim_checksum,
            seed: m.seed,
            shape: m.shape,
            examples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
