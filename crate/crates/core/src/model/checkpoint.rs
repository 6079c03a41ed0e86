//! Binary checkpoint container.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field            | encoding                                   |
//! |------------------|--------------------------------------------|
//! | magic            | 8 bytes `SYMMIMCK`                         |
//! | version          | u32, currently 1                           |
//! | config           | u64 byte length, then UTF-8 `key = value` text |
//! | step             | u64                                        |
//! | momentum coef    | f64                                        |
//! | tensor count     | u64                                        |
//! | per tensor: name | u64 byte length, then UTF-8                |
//! | per tensor: ndim | u64, then `ndim` u64 dimensions            |
//! | per tensor: data | `prod(dims)` f64 values, row-major         |
//!
//! Tensor names are prefixed by tree: `q.` online parameters, `k.` momentum
//! parameters, `opt.m.` / `opt.v.` AdamW first and second moments.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::Parameterized;
use super::{DualEncoderState, EncoderConfig, HeadsConfig, MomentumNet, OnlineNet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SYMMIMCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub step: u64,
    pub momentum_coef: f64,
    pub tensors: Vec<NamedTensor>,
}

pub(crate) fn export<P: Parameterized + ?Sized>(tree: &P, prefix: &str, out: &mut Vec<NamedTensor>) {
    for p in tree.params() {
        out.push(NamedTensor {
            name: format!("{prefix}{}", p.name),
            shape: p.shape,
            data: p.data.to_vec(),
        });
    }
}

/// Copies tensors named `prefix + name` into `tree`, requiring every tensor of
/// the tree to be present with a matching shape.
pub(crate) fn import<P: Parameterized + ?Sized>(tree: &mut P, prefix: &str, tensors: &[NamedTensor]) -> Result<()> {
    let layout = tree.layout();
    for ((name, shape), dst) in layout.into_iter().zip(tree.params_mut()) {
        let full = format!("{prefix}{name}");
        let src = tensors
            .iter()
            .find(|t| t.name == full)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {full}")))?;
        if src.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {full} has shape {:?}, model expects {shape:?}",
                src.shape
            )));
        }
        dst.data.copy_from_slice(&src.data);
    }
    Ok(())
}

impl Checkpoint {
    pub fn from_state(config: &str, state: &DualEncoderState) -> Self {
        let mut tensors = Vec::new();
        export(&state.online, "q.", &mut tensors);
        export(&state.momentum, "k.", &mut tensors);
        Self {
            config: config.to_string(),
            step: state.step,
            momentum_coef: state.m,
            tensors,
        }
    }

    /// Rebuilds the dual-encoder state for the given architecture, verifying
    /// shapes and the momentum/online structural mirror.
    pub fn to_state(&self, encoder: &EncoderConfig, heads: &HeadsConfig) -> Result<DualEncoderState> {
        let mut online = OnlineNet::init(encoder, heads, 0);
        import(&mut online, "q.", &self.tensors)?;
        let mut momentum = MomentumNet::copy_of(&online);
        import(&mut momentum, "k.", &self.tensors)?;
        let state = DualEncoderState {
            online,
            momentum,
            m: self.momentum_coef,
            step: self.step,
        };
        state.check_structure()?;
        Ok(state)
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.tensors.iter().any(|t| t.name.starts_with(prefix))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        write_str(&mut out, &self.config);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.momentum_coef.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            write_str(&mut out, &t.name);
            out.extend_from_slice(&(t.shape.len() as u64).to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let config = r.string()?;
        let step = r.u64()?;
        let momentum_coef = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let count = r.u64()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u64()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config,
            step,
            momentum_coef,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}
