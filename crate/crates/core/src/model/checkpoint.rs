//! Self-describing binary container for parameters and training state.
//!
//! ```text
//! magic    8 bytes  "CONFSS01"
//! u64 LE   header length, then the header as UTF-8 JSON
//! u64 LE   number of arrays, then per array:
//!   u32 LE name length, name (UTF-8)
//!   u32 LE rank, rank × u64 LE dimensions
//!   product(dims) × f64 LE values
//! ```
//! Readers reject truncated input and trailing bytes.

use std::path::Path;

use serde_json::{json, Value};

use super::{ModelConfig, Transformer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CONFSS01";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedArray {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| T::lit(x)).collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub header: Value,
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("implausible {what} {n}")))
    }
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("JSON value serializes");
        let mut out = Vec::with_capacity(
            64 + header.len() + self.arrays.iter().map(|a| 16 + a.name.len() + 8 * a.data.len()).sum::<usize>(),
        );
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in &a.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let hlen = r.len("header length")?;
        let header: Value = serde_json::from_slice(r.take(hlen, "header")?)
            .map_err(|e| Error::Checkpoint(format!("header is not valid JSON: {e}")))?;
        let count = r.len("array count")?;
        let mut arrays = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let nlen = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(nlen, "array name")?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.len("dimension")?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= bytes.len()))
                .ok_or_else(|| Error::Checkpoint(format!("implausible shape {shape:?} for {name}")))?;
            let raw = r.take(8 * n, &format!("values of {name}"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last array",
                bytes.len() - r.pos
            )));
        }
        Ok(Container { header, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn array(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }
}

impl<T: Scalar> Transformer<T> {
    pub fn to_container(&self) -> Container {
        Container {
            header: json!({
                "kind": "model",
                "scalar": T::NAME,
                "model_config": self.config(),
            }),
            arrays: self
                .param_names()
                .zip(self.params())
                .map(|(n, p)| NamedArray::from_tensor(n, p))
                .collect(),
        }
    }

    /// Loads the parameters named by the header's `model_config`; any other
    /// arrays (e.g. optimizer moments) are ignored.
    pub fn from_container(c: &Container) -> Result<Self> {
        let cfg = c
            .header
            .get("model_config")
            .ok_or_else(|| Error::Checkpoint("header has no model_config".into()))?;
        let config: ModelConfig = serde_json::from_value(cfg.clone())
            .map_err(|e| Error::Checkpoint(format!("model_config: {e}")))?;
        config.validate()?;
        let layout = super::Layout::new(&config);
        let params = layout
            .specs
            .iter()
            .map(|spec| {
                let a = c.array(&spec.name).ok_or_else(|| {
                    Error::Checkpoint(format!("missing parameter {}", spec.name))
                })?;
                if a.shape != spec.shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {} has shape {:?} but the config requires {:?}",
                        spec.name, a.shape, spec.shape
                    )));
                }
                a.to_tensor()
            })
            .collect::<Result<Vec<_>>>()?;
        Transformer::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}
