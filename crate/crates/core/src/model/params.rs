//! Named parameter trees.
//!
//! Every trainable structure exposes its tensors as a flat, ordered list of
//! `(name, shape, data)` entries. Gradients, optimizer moments and EMA copies
//! reuse the same structure types, so walking two trees in lockstep pairs up
//! corresponding tensors.

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

pub struct ParamRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn push_vec<'a>(out: &mut Vec<ParamRef<'a>>, prefix: &str, name: &str, a: &'a Array1<f64>) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape: vec![a.len()],
        data: a.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_mat<'a>(out: &mut Vec<ParamRef<'a>>, prefix: &str, name: &str, a: &'a Array2<f64>) {
    out.push(ParamRef {
        name: join(prefix, name),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_vec_mut<'a>(out: &mut Vec<ParamMut<'a>>, prefix: &str, name: &str, a: &'a mut Array1<f64>) {
    out.push(ParamMut {
        name: join(prefix, name),
        data: a.as_slice_mut().expect("parameters are contiguous"),
    });
}

pub(crate) fn push_mat_mut<'a>(out: &mut Vec<ParamMut<'a>>, prefix: &str, name: &str, a: &'a mut Array2<f64>) {
    out.push(ParamMut {
        name: join(prefix, name),
        data: a.as_slice_mut().expect("parameters are contiguous"),
    });
}

pub trait Parameterized {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>);

    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        self.collect_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// `(name, shape)` for every tensor, in traversal order.
    fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.params().into_iter().map(|p| (p.name, p.shape)).collect()
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.fill(0.0);
        }
        z
    }

    fn fill(&mut self, value: f64) {
        for p in self.params_mut() {
            p.data.fill(value);
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            h.update(p.name.as_bytes());
            for d in &p.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn max_abs(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.data.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}
