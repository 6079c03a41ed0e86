//! Helpers shared by the integration test targets: small configs and
//! independent oracles written without the crate's own math.

#![allow(dead_code)]

use symmim::model::{EncoderConfig, HeadsConfig};
use symmim::train::RunConfig;

/// A model of about 1.2k parameters on 8×8 images (4×4 tokens).
pub fn tiny_cfg() -> RunConfig {
    RunConfig {
        encoder: EncoderConfig {
            depth: 1,
            dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_size: 2,
            image_size: 8,
            channels: 3,
            drop_path: 0.0,
        },
        heads: HeadsConfig {
            proj_layers: 3,
            proj_hidden: 8,
            proj_out: 4,
            pred_layers: 2,
            pred_hidden: 8,
            pred_out: 4,
        },
        batch_size: 4,
        total_steps: 6,
        warmup_steps: 2,
        checkpoint_every: 0,
        ..RunConfig::default()
    }
}

/// Cross-entropy of `positives[i]` under softmax over `cos(q_i, k_j) / tau`,
/// averaged over queries. Plain loops, no ndarray.
pub fn info_nce_oracle(queries: &[Vec<f64>], keys: &[Vec<f64>], positives: &[usize], tau: f64) -> f64 {
    let unit = |v: &Vec<f64>| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    };
    let ks: Vec<Vec<f64>> = keys.iter().map(unit).collect();
    let mut total = 0.0;
    for (q, &pos) in queries.iter().zip(positives) {
        let q = unit(q);
        let logits: Vec<f64> = ks
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[pos];
    }
    total / queries.len() as f64
}

/// Minimal binary PPM reader: returns `(width, height, rgb bytes)`.
pub fn parse_p6(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(format!("magic {:?}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|e| format!("{s}: {e}"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(format!("maxval {max}"));
    }
    // exactly one whitespace byte separates the header from the raster
    let body = &bytes[i + 1..];
    if body.len() != w * h * 3 {
        return Err(format!("raster has {} bytes, expected {}", body.len(), w * h * 3));
    }
    Ok((w, h, body.to_vec()))
}

/// `[0, 1]` value to the byte stored in an 8-bit image.
pub fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
