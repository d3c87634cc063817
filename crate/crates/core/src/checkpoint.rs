//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "PLUGDEF\0"
//! version   u32      1
//! kind      u32 length + UTF-8
//! header    u32 length + UTF-8 JSON (model config, policy, ...)
//! count     u32
//! count x { name: u32 length + UTF-8, ndim: u32, dims: ndim x u32, values: f32 x numel }
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Module, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"PLUGDEF\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct StoredParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub header: serde_json::Value,
    pub params: Vec<StoredParam>,
}

impl Checkpoint {
    pub fn from_module<T: Real>(kind: &str, header: serde_json::Value, m: &impl Module<T>) -> Self {
        let mut params = Vec::new();
        m.visit(&mut |p| {
            params.push(StoredParam {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().iter().map(|v| v.to_f64() as f32).collect(),
            })
        });
        Self {
            kind: kind.to_string(),
            header,
            params,
        }
    }

    /// Copies stored values into `m`. Every parameter of `m` must be present
    /// with the same shape, and nothing else may be stored.
    pub fn apply_to<T: Real>(&self, m: &mut impl Module<T>) -> Result<()> {
        let mut seen = 0usize;
        let mut err = None;
        m.visit_mut(&mut |p| {
            if err.is_some() {
                return;
            }
            match self.params.iter().find(|s| s.name == p.name) {
                Some(s) if s.shape == p.tensor.shape() => {
                    for (d, &v) in p.tensor.data_mut().iter_mut().zip(&s.data) {
                        *d = T::from_f64(v as f64);
                    }
                    seen += 1;
                }
                Some(s) => {
                    err = Some(Error::Shape {
                        expected: p.tensor.shape().to_vec(),
                        actual: s.shape.clone(),
                    })
                }
                None => err = Some(Error::config(format!("checkpoint has no parameter {}", p.name))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint holds {} parameters, model has {seen}",
                self.params.len()
            )));
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Option<&StoredParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn tensor<T: Real>(&self, name: &str) -> Option<Tensor<T>> {
        self.param(name).map(|p| {
            Tensor::new(p.shape.clone(), p.data.iter().map(|&v| T::from_f64(v as f64)).collect())
                .expect("stored shape")
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.header.to_string());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &d in &p.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "not a checkpoint".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: 8,
                msg: format!("unsupported version {version}"),
            });
        }
        let kind = r.string()?;
        let at = r.pos;
        let header = serde_json::from_str(&r.string()?).map_err(|e| Error::Parse {
            offset: at,
            msg: e.to_string(),
        })?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.push(StoredParam { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                msg: "trailing bytes".into(),
            });
        }
        Ok(Self { kind, header, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub(crate) fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    pub(crate) bytes: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.bytes.len(),
                msg: format!("truncated: wanted {n} bytes at {}", self.pos),
            }),
        }
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Parse {
            offset: at,
            msg: "invalid UTF-8".into(),
        })
    }
}
