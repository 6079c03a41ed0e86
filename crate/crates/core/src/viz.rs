//! Reconstruction grids and mask pictures as PPM images.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masking::{MaskSpec, TokenMask};
use crate::model::checkpoint::Checkpoint;
use crate::model::OnlineNet;
use crate::patching::{patchify, unpatchify, ImageBatch, PatchBatch};
use crate::ppm::{to_byte, RgbImage};
use crate::train::RunConfig;

pub const MID_GRAY: [u8; 3] = [128, 128, 128];

/// Random 75% masking plus checkerboards with 1-, 2- and 4-token cells.
pub fn default_specs() -> Vec<MaskSpec> {
    vec![
        MaskSpec::Random { ratio: 0.75 },
        MaskSpec::Checkerboard { cell: 1, phase: None },
        MaskSpec::Checkerboard { cell: 2, phase: None },
        MaskSpec::Checkerboard { cell: 4, phase: None },
    ]
}

fn pixel(img: &ImageBatch, b: usize, y: usize, x: usize) -> [u8; 3] {
    let v = &img.values;
    [to_byte(v[[b, 0, y, x]]), to_byte(v[[b, 1, y, x]]), to_byte(v[[b, 2, y, x]])]
}

/// One row per image: `[original | masked input | composite]`. Masked tokens
/// are mid-gray in the middle panel; the composite shows `predicted` pixels on
/// masked tokens and the original pixels everywhere else.
pub fn compose_grid(original: &ImageBatch, predicted: &ImageBatch, masks: &[TokenMask], p: usize) -> Result<RgbImage> {
    let (n, c, h, w) = original.values.dim();
    if predicted.values.dim() != (n, c, h, w) || c != 3 {
        return Err(Error::shape(format!(
            "original {:?} and prediction {:?} must be equal RGB batches",
            original.values.dim(),
            predicted.values.dim()
        )));
    }
    if masks.len() != n || masks.iter().any(|m| m.grid_h() * p != h || m.grid_w() * p != w) {
        return Err(Error::shape(format!("masks do not cover {n} images of {h}x{w} with {p}-pixel tokens")));
    }
    let mut grid = RgbImage::new(3 * w, n * h);
    for (b, mask) in masks.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let hidden = mask.get(y / p, x / p);
                let orig = pixel(original, b, y, x);
                let gy = b * h + y;
                grid.set_pixel(x, gy, orig);
                grid.set_pixel(w + x, gy, if hidden { MID_GRAY } else { orig });
                grid.set_pixel(2 * w + x, gy, if hidden { pixel(predicted, b, y, x) } else { orig });
            }
        }
    }
    Ok(grid)
}

/// Pixel predictions of the online network for `images` under `masks`.
pub fn reconstruct(online: &OnlineNet, patch_size: usize, images: &ImageBatch, masks: &[TokenMask]) -> Result<ImageBatch> {
    let patches = patchify(images, patch_size)?;
    let feats = online.backbone.features(&patches, masks)?;
    let recon = online
        .recon
        .forward(&feats)
        .into_shape_with_order((patches.n(), patches.tokens(), patches.d_patch()))
        .map_err(|e| Error::shape(e.to_string()))?;
    unpatchify(
        &PatchBatch {
            values: recon,
            grid_h: patches.grid_h,
            grid_w: patches.grid_w,
            channels: patches.channels,
        },
        patch_size,
    )
}

/// Writes one grid per mask spec into `out_dir` and returns the paths.
pub fn render_reconstructions(
    ck: &Checkpoint,
    images: &ImageBatch,
    specs: &[MaskSpec],
    seed: u64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let cfg = RunConfig::from_text(&ck.config)?;
    let enc = &cfg.encoder;
    if images.channels() != 3 || images.height() != enc.image_size || images.width() != enc.image_size {
        return Err(Error::shape(format!(
            "images are {}x{}x{}, checkpoint expects 3x{2}x{2}",
            images.channels(),
            images.height(),
            enc.image_size
        )));
    }
    let grid = enc.grid();
    for spec in specs {
        spec.validate(grid, grid)?;
    }
    let online = ck.to_state(enc, &cfg.heads)?.online;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut paths = Vec::with_capacity(specs.len());
    for spec in specs {
        let masks = (0..images.n())
            .map(|_| spec.sample(grid, grid, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let predicted = reconstruct(&online, enc.patch_size, images, &masks)?;
        let img = compose_grid(images, &predicted, &masks, enc.patch_size)?;
        let path = out_dir.join(format!("recon_{}.ppm", spec.label()));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Masked tokens black, visible tokens white, `p` pixels per token side.
pub fn render_mask(mask: &TokenMask, p: usize) -> RgbImage {
    let mut img = RgbImage::new(mask.grid_w() * p, mask.grid_h() * p);
    for y in 0..img.height {
        for x in 0..img.width {
            let v = if mask.get(y / p, x / p) { 0 } else { 255 };
            img.set_pixel(x, y, [v; 3]);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{checkerboard_mask, Phase};
    use ndarray::Array4;

    fn batch(n: usize, s: usize) -> ImageBatch {
        ImageBatch::new(Array4::from_shape_fn((n, 3, s, s), |(b, c, y, x)| {
            ((b * 7 + c * 5 + y * 3 + x) % 17) as f64 / 16.0
        }))
        .unwrap()
    }

    #[test]
    fn visible_tokens_are_bit_exact_and_layout_matches() {
        let orig = batch(2, 4);
        let pred = ImageBatch::new(orig.values.mapv(|v| 1.0 - v)).unwrap();
        let masks = vec![checkerboard_mask(2, 2, 1, Phase::Even).unwrap(); 2];
        let g = compose_grid(&orig, &pred, &masks, 2).unwrap();
        assert_eq!((g.width, g.height), (12, 8));
        for b in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    let o = g.pixel(x, b * 4 + y);
                    assert_eq!(o, pixel(&orig, b, y, x));
                    if masks[b].get(y / 2, x / 2) {
                        assert_eq!(g.pixel(4 + x, b * 4 + y), MID_GRAY);
                        assert_eq!(g.pixel(8 + x, b * 4 + y), pixel(&pred, b, y, x));
                    } else {
                        assert_eq!(g.pixel(8 + x, b * 4 + y), o);
                    }
                }
            }
        }
        let visible = vec![TokenMask::all_visible(2, 2); 2];
        let g = compose_grid(&orig, &pred, &visible, 2).unwrap();
        for y in 0..8 {
            for x in 0..4 {
                assert_eq!(g.pixel(8 + x, y), g.pixel(x, y));
            }
        }
    }

    #[test]
    fn mask_pictures() {
        let m = checkerboard_mask(2, 2, 1, Phase::Even).unwrap();
        let img = render_mask(&m, 1);
        assert_eq!((img.width, img.height), (2, 2));
        for (i, j) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            let expected = if (i + j) % 2 == 0 { [0; 3] } else { [255; 3] };
            assert_eq!(img.pixel(j, i), expected);
        }
        let all = TokenMask::from_raw(3, 2, vec![true; 6]).unwrap();
        let img = render_mask(&all, 4);
        assert!(img.data.iter().all(|&v| v == 0));
        let bytes = img.to_ppm();
        assert!(bytes.starts_with(b"P6\n8 12\n255\n"));
        assert_eq!(bytes.len(), b"P6\n8 12\n255\n".len() + 8 * 12 * 3);
    }

    #[test]
    fn geometry_mismatch_is_an_error() {
        let orig = batch(1, 4);
        let masks = vec![TokenMask::all_visible(3, 3)];
        assert!(compose_grid(&orig, &orig, &masks, 2).is_err());
    }
}
