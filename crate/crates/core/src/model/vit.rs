//! Vision transformer backbone operating on a full-length token sequence
//! (masked positions carry the mask token; no class token).

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;

use super::layers::{Block, BlockCache, BranchScales, LayerNorm, LayerNormCache, Linear};
use super::params::{join, push_mat, push_mat_mut, push_vec, push_vec_mut, ParamMut, ParamRef, Parameterized};
use crate::error::{Error, Result};
use crate::masking::TokenMask;
use crate::patching::{apply_mask, PatchBatch};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Pixels per token side.
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Maximum stochastic-depth rate (linearly increasing over blocks).
    pub drop_path: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            patch_size: 4,
            image_size: 32,
            channels: 3,
            drop_path: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 {
            return Err(Error::config("encoder dim and heads must be positive"));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "encoder dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "patch size {} does not divide image size {}",
                self.patch_size, self.image_size
            )));
        }
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::config("drop_path must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn d_patch(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    /// Drop rate of block `i`.
    pub fn drop_rate(&self, block: usize) -> f64 {
        if self.depth <= 1 {
            self.drop_path
        } else {
            self.drop_path * block as f64 / (self.depth - 1) as f64
        }
    }
}

/// 2-D sine-cosine position table of shape `(grid², dim)`; zero when `dim`
/// is not a multiple of 4.
pub fn sincos_position_table(grid: usize, dim: usize) -> Array2<f64> {
    let mut table = Array2::zeros((grid * grid, dim));
    if dim % 4 != 0 {
        return table;
    }
    let quarter = dim / 4;
    for i in 0..grid {
        for j in 0..grid {
            let row = i * grid + j;
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                // First half encodes the column, second half the row.
                table[[row, k]] = (j as f64 * omega).sin();
                table[[row, quarter + k]] = (j as f64 * omega).cos();
                table[[row, 2 * quarter + k]] = (i as f64 * omega).sin();
                table[[row, 3 * quarter + k]] = (i as f64 * omega).cos();
            }
        }
    }
    table
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub patch_embed: Linear,
    pub mask_token: Array1<f64>,
    /// Learnable, initialized to the sine-cosine table.
    pub pos_embed: Array2<f64>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
}

pub struct EncodeCache {
    tokens: usize,
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
}

pub struct BackboneCache {
    flat_patches: Array2<f64>,
    masks: Vec<Vec<usize>>,
    encode: EncodeCache,
}

impl Backbone {
    pub fn init<R: Rng>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        let patch_embed = Linear::init(cfg.d_patch(), cfg.dim, rng);
        let mask_token = Array1::from_shape_simple_fn(cfg.dim, || rng.gen_range(-0.02..0.02));
        let blocks = (0..cfg.depth)
            .map(|_| Block::init(cfg.dim, cfg.heads, cfg.mlp_hidden(), rng))
            .collect();
        Self {
            patch_embed,
            mask_token,
            pos_embed: sincos_position_table(cfg.grid(), cfg.dim),
            blocks,
            norm: LayerNorm::new(cfg.dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mask_token.len()
    }

    pub fn tokens(&self) -> usize {
        self.pos_embed.nrows()
    }

    /// Patch embedding, mask-token substitution, then positional embedding.
    /// Returns `(n * t, dim)` token rows.
    pub fn embed(&self, patches: &PatchBatch, masks: &[TokenMask]) -> Result<Array2<f64>> {
        let (n, t, d) = patches.values.dim();
        if t != self.tokens() {
            return Err(Error::shape(format!("{t} tokens, encoder expects {}", self.tokens())));
        }
        if d != self.patch_embed.input_dim() {
            return Err(Error::shape(format!(
                "patch dim {d}, encoder expects {}",
                self.patch_embed.input_dim()
            )));
        }
        let flat = patches
            .values
            .view()
            .into_shape_with_order((n * t, d))
            .map_err(|e| Error::shape(e.to_string()))?
            .to_owned();
        let emb = self
            .patch_embed
            .forward(&flat)
            .into_shape_with_order((n, t, self.dim()))
            .map_err(|e| Error::shape(e.to_string()))?;
        let mut x: Array3<f64> = apply_mask(&emb, masks, self.mask_token.view())?;
        for mut img in x.outer_iter_mut() {
            img += &self.pos_embed;
        }
        x.into_shape_with_order((n * t, self.dim()))
            .map_err(|e| Error::shape(e.to_string()))
    }

    /// Transformer blocks followed by the final LayerNorm on `(n * t, dim)` rows.
    pub fn encode(&self, x: &Array2<f64>, drop: Option<&[Option<BranchScales>]>) -> Result<(Array2<f64>, EncodeCache)> {
        let tokens = self.tokens();
        if x.ncols() != self.dim() || x.nrows() % tokens != 0 {
            return Err(Error::shape(format!(
                "token matrix {}x{} is not a whole number of {tokens}-token sequences of width {}",
                x.nrows(),
                x.ncols(),
                self.dim()
            )));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let scales = drop.and_then(|d| d.get(i).cloned().flatten());
            let (out, cache) = block.forward(&h, tokens, scales);
            caches.push(cache);
            h = out;
        }
        let (out, norm) = self.norm.forward(&h);
        Ok((
            out,
            EncodeCache {
                tokens,
                blocks: caches,
                norm,
            },
        ))
    }

    pub fn encode_backward(&self, cache: &EncodeCache, dy: &Array2<f64>, grad: &mut Backbone) -> Array2<f64> {
        let mut d = self.norm.backward(&cache.norm, dy, &mut grad.norm);
        for (i, block) in self.blocks.iter().enumerate().rev() {
            d = block.backward(&cache.blocks[i], &d, cache.tokens, &mut grad.blocks[i]);
        }
        d
    }

    pub fn forward(
        &self,
        patches: &PatchBatch,
        masks: &[TokenMask],
        drop: Option<&[Option<BranchScales>]>,
    ) -> Result<(Array2<f64>, BackboneCache)> {
        let x = self.embed(patches, masks)?;
        let (out, encode) = self.encode(&x, drop)?;
        let (n, t, d) = patches.values.dim();
        let flat_patches = patches
            .values
            .view()
            .into_shape_with_order((n * t, d))
            .map_err(|e| Error::shape(e.to_string()))?
            .to_owned();
        Ok((
            out,
            BackboneCache {
                flat_patches,
                masks: masks.iter().map(TokenMask::masked_indices).collect(),
                encode,
            },
        ))
    }

    /// Inference forward without caches.
    pub fn features(&self, patches: &PatchBatch, masks: &[TokenMask]) -> Result<Array2<f64>> {
        let x = self.embed(patches, masks)?;
        Ok(self.encode(&x, None)?.0)
    }

    pub fn backward(&self, cache: &BackboneCache, dy: &Array2<f64>, grad: &mut Backbone) {
        let mut dx = self.encode_backward(&cache.encode, dy, grad);
        let t = self.tokens();
        for img in dx.axis_chunks_iter(Axis(0), t) {
            grad.pos_embed += &img;
        }
        for (b, masked) in cache.masks.iter().enumerate() {
            for &idx in masked {
                let mut row = dx.row_mut(b * t + idx);
                grad.mask_token += &row;
                row.fill(0.0);
            }
        }
        self.patch_embed.accumulate(&cache.flat_patches, &dx, &mut grad.patch_embed);
    }

    /// Stochastic-depth multipliers for every block, or `None` when disabled.
    pub fn sample_drop_path<R: Rng>(&self, cfg: &EncoderConfig, n: usize, rng: &mut R) -> Option<Vec<Option<BranchScales>>> {
        if cfg.drop_path <= 0.0 {
            return None;
        }
        let mut draw = |rate: f64| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
                .collect()
        };
        Some(
            (0..self.blocks.len())
                .map(|i| {
                    let rate = cfg.drop_rate(i);
                    (rate > 0.0).then(|| BranchScales {
                        attn: draw(rate),
                        mlp: draw(rate),
                    })
                })
                .collect(),
        )
    }

    /// Mean over tokens of each image's features: `(n, dim)`.
    pub fn mean_pool(features: &Array2<f64>, tokens: usize) -> Array2<f64> {
        let n = features.nrows() / tokens;
        let mut out = Array2::zeros((n, features.ncols()));
        for (b, img) in features.axis_chunks_iter(Axis(0), tokens).enumerate() {
            out.slice_mut(s![b, ..]).assign(&img.mean_axis(Axis(0)).expect("non-empty"));
        }
        out
    }
}

impl Parameterized for Backbone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        push_vec(out, prefix, "mask_token", &self.mask_token);
        push_mat(out, prefix, "pos_embed", &self.pos_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect(&join(prefix, "norm"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.patch_embed.collect_mut(&join(prefix, "patch_embed"), out);
        push_vec_mut(out, prefix, "mask_token", &mut self.mask_token);
        push_mat_mut(out, prefix, "pos_embed", &mut self.pos_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.norm.collect_mut(&join(prefix, "norm"), out);
    }
}
