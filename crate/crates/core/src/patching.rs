//! Image ↔ patch-token conversion and mask-token substitution.
//!
//! Tokens are ordered row-major over the token grid (top-left first). Each
//! token is its `c × p × p` sub-image flattened channel-major, then row, then
//! column, so element `(ch, y, x)` of a patch sits at `ch * p * p + y * p + x`.

use ndarray::{s, Array3, Array4, ArrayView1};

use crate::error::{Error, Result};
use crate::masking::TokenMask;

/// Images as `(n, c, h, w)` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    pub values: Array4<f64>,
}

impl ImageBatch {
    pub fn new(values: Array4<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("image batch contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn n(&self) -> usize {
        self.values.dim().0
    }

    pub fn channels(&self) -> usize {
        self.values.dim().1
    }

    pub fn height(&self) -> usize {
        self.values.dim().2
    }

    pub fn width(&self) -> usize {
        self.values.dim().3
    }
}

/// Patch tokens as `(n, t, d_patch)` with `t = grid_h * grid_w`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchBatch {
    pub values: Array3<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub channels: usize,
}

impl PatchBatch {
    pub fn n(&self) -> usize {
        self.values.dim().0
    }

    pub fn tokens(&self) -> usize {
        self.values.dim().1
    }

    pub fn d_patch(&self) -> usize {
        self.values.dim().2
    }
}

pub fn patchify(images: &ImageBatch, p: usize) -> Result<PatchBatch> {
    let (n, c, h, w) = images.values.dim();
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "patch size {p} does not divide image size {h}x{w}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let d = c * p * p;
    let mut out = Array3::<f64>::zeros((n, gh * gw, d));
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let t = gy * gw + gx;
                let block = images.values.slice(s![b, .., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                let mut token = out.slice_mut(s![b, t, ..]);
                for (dst, src) in token.iter_mut().zip(block.iter()) {
                    *dst = *src;
                }
            }
        }
    }
    Ok(PatchBatch {
        values: out,
        grid_h: gh,
        grid_w: gw,
        channels: c,
    })
}

pub fn unpatchify(patches: &PatchBatch, p: usize) -> Result<ImageBatch> {
    let (n, t, d) = patches.values.dim();
    let c = patches.channels;
    if p == 0 || d != c * p * p {
        return Err(Error::shape(format!(
            "patch dim {d} does not equal channels {c} x {p}^2"
        )));
    }
    if t != patches.grid_h * patches.grid_w {
        return Err(Error::shape(format!(
            "{t} tokens for a {}x{} grid",
            patches.grid_h, patches.grid_w
        )));
    }
    let (gh, gw) = (patches.grid_h, patches.grid_w);
    let mut out = Array4::<f64>::zeros((n, c, gh * p, gw * p));
    for b in 0..n {
        for gy in 0..gh {
            for gx in 0..gw {
                let token = patches.values.slice(s![b, gy * gw + gx, ..]);
                let mut block = out.slice_mut(s![b, .., gy * p..(gy + 1) * p, gx * p..(gx + 1) * p]);
                for (dst, src) in block.iter_mut().zip(token.iter()) {
                    *dst = *src;
                }
            }
        }
    }
    Ok(ImageBatch { values: out })
}

/// Replaces embedded tokens at masked positions with `mask_token`.
///
/// `embeddings` is `(n, t, dim)`; `masks` holds one mask per image. Positional
/// embeddings are added by the caller afterwards.
pub fn apply_mask(
    embeddings: &Array3<f64>,
    masks: &[TokenMask],
    mask_token: ArrayView1<'_, f64>,
) -> Result<Array3<f64>> {
    let (n, t, dim) = embeddings.dim();
    if masks.len() != n {
        return Err(Error::shape(format!("{} masks for a batch of {n}", masks.len())));
    }
    if mask_token.len() != dim {
        return Err(Error::shape(format!(
            "mask token has dim {}, embeddings have {dim}",
            mask_token.len()
        )));
    }
    let mut out = embeddings.clone();
    for (b, mask) in masks.iter().enumerate() {
        if mask.len() != t {
            return Err(Error::shape(format!(
                "mask grid {}x{} does not match {t} tokens",
                mask.grid_h(),
                mask.grid_w()
            )));
        }
        for idx in mask.masked_indices() {
            out.slice_mut(s![b, idx, ..]).assign(&mask_token);
        }
    }
    Ok(out)
}
