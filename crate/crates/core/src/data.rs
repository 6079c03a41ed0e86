//! Small image corpora: seeded synthetic fields, PPM folders and CIFAR-10
//! binary batches.
//!
//! All sources are materialized in memory as `(3, size, size)` images in
//! `[0, 1]` with an integer label. Batch order is a pure function of the
//! shuffle seed and the batch index, which is what makes resumed training
//! reproduce an uninterrupted run.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use ndarray::{s, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patching::ImageBatch;
use crate::ppm::RgbImage;

pub const CIFAR_SIDE: usize = 32;
/// One label byte followed by 1024 red, 1024 green and 1024 blue bytes,
/// each plane row-major.
pub const CIFAR_RECORD: usize = 1 + 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_CLASSES: usize = 10;

/// Synthetic corpus size when no limit is given.
pub const DEFAULT_SYNTHETIC_SIZE: usize = 512;

/// Minimum |mean(R) − mean(B)| of a synthetic image; the label is the sign.
pub const SYNTHETIC_MARGIN: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    ImageFolder,
    CifarBinary,
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DataSource::Synthetic => "synthetic",
            DataSource::ImageFolder => "image_folder",
            DataSource::CifarBinary => "cifar_binary",
        })
    }
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "image_folder" => Ok(DataSource::ImageFolder),
            "cifar_binary" => Ok(DataSource::CifarBinary),
            other => Err(Error::config(format!("unknown data source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSel {
    pub fraction: f64,
    pub seed: u64,
    pub part: SplitPart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub source: DataSource,
    pub root: PathBuf,
    pub image_size: usize,
    pub limit: Option<usize>,
    pub seed: u64,
    pub split: Option<SplitSel>,
}

impl DatasetSpec {
    pub fn synthetic(image_size: usize, limit: usize, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic,
            root: PathBuf::new(),
            image_size,
            limit: Some(limit),
            seed,
            split: None,
        }
    }
}

/// Splits `spec` into disjoint train/val views: the corpus indices are
/// shuffled with `seed` and the first `round(fraction * N)` go to train.
pub fn train_val_split(spec: &DatasetSpec, fraction: f64, seed: u64) -> Result<(DatasetSpec, DatasetSpec)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mk = |part| DatasetSpec {
        split: Some(SplitSel { fraction, seed, part }),
        ..spec.clone()
    };
    Ok((mk(SplitPart::Train), mk(SplitPart::Val)))
}

/// Train and val index sets of a split over `n` items.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = ((fraction * n as f64).round() as usize).min(n);
    let mut train = idx[..cut].to_vec();
    let mut val = idx[cut..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Array3<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub image_size: usize,
    /// Files that could not be decoded and were skipped.
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn open(spec: &DatasetSpec) -> Result<Self> {
        if spec.image_size == 0 {
            return Err(Error::config("image_size must be positive"));
        }
        let mut ds = match spec.source {
            DataSource::Synthetic => synthetic(spec.image_size, spec.limit.unwrap_or(DEFAULT_SYNTHETIC_SIZE), spec.seed),
            DataSource::ImageFolder => load_image_folder(&spec.root, spec.image_size)?,
            DataSource::CifarBinary => load_cifar(&spec.root, spec.image_size)?,
        };
        if let Some(limit) = spec.limit {
            if limit > ds.len() {
                return Err(Error::Data(format!(
                    "limit {limit} exceeds corpus size {}",
                    ds.len()
                )));
            }
            ds.images.truncate(limit);
            ds.labels.truncate(limit);
        }
        if let Some(split) = spec.split {
            let (train, val) = split_indices(ds.len(), split.fraction, split.seed);
            let keep = match split.part {
                SplitPart::Train => train,
                SplitPart::Val => val,
            };
            ds = ds.subset(&keep);
        }
        if ds.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            image_size: self.image_size,
            skipped: self.skipped,
        }
    }

    /// Replaces labels with seeded uniform draws over the same class count.
    pub fn with_random_labels(&self, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.clone();
        for l in &mut out.labels {
            *l = rng.gen_range(0..self.num_classes.max(1));
        }
        out
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size)
    }

    /// Order of items in `epoch` under `shuffle_seed`.
    pub fn epoch_order(&self, shuffle_seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
        rng.set_stream(epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn gather(&self, indices: &[usize]) -> LabeledBatch {
        let s = self.image_size;
        let mut values = Array4::zeros((indices.len(), 3, s, s));
        for (b, &i) in indices.iter().enumerate() {
            values.slice_mut(s![b, .., .., ..]).assign(&self.images[i]);
        }
        LabeledBatch {
            images: ImageBatch { values },
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The `index`-th batch of the endless epoch stream. The final batch of
    /// each epoch holds the remainder.
    pub fn batch_at(&self, index: u64, batch_size: usize, shuffle_seed: u64) -> LabeledBatch {
        let per_epoch = self.batches_per_epoch(batch_size) as u64;
        let epoch = index / per_epoch;
        let within = (index % per_epoch) as usize;
        let order = self.epoch_order(shuffle_seed, epoch);
        let end = ((within + 1) * batch_size).min(order.len());
        self.gather(&order[within * batch_size..end])
    }

    /// One epoch of batches in shuffled order.
    pub fn epoch(&self, batch_size: usize, shuffle_seed: u64) -> impl Iterator<Item = LabeledBatch> + '_ {
        let order = self.epoch_order(shuffle_seed, 0);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.gather(&c))
    }

    /// Every item in corpus order, chunked.
    pub fn sequential(&self, batch_size: usize) -> impl Iterator<Item = LabeledBatch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.gather(&c))
    }
}

/// Opens `spec` and yields one shuffled epoch of image batches.
pub fn load_batches(spec: &DatasetSpec, batch_size: usize, shuffle_seed: u64) -> Result<Vec<ImageBatch>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be positive"));
    }
    let ds = Dataset::open(spec)?;
    Ok(ds.epoch(batch_size, shuffle_seed).map(|b| b.images).collect())
}

/// A seeded smooth image: each channel is a random DC offset plus three
/// random 2-D sinusoids. Label = [mean(R) > mean(B)], and images closer to the
/// decision boundary than [`SYNTHETIC_MARGIN`] are redrawn.
pub fn synthetic_item(size: usize, seed: u64, index: u64) -> (Array3<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    loop {
        let mut img = Array3::zeros((3, size, size));
        for c in 0..3 {
            let offset = rng.gen_range(-0.2..0.2);
            let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.5..1.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let amp: f64 = waves.iter().map(|w| w.0).sum();
            for y in 0..size {
                for x in 0..size {
                    let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
                    let f: f64 = waves
                        .iter()
                        .map(|(a, fx, fy, ph)| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                        .sum();
                    img[[c, y, x]] = 0.5 + offset + 0.25 * f / amp;
                }
            }
        }
        let functional = red_minus_blue(&img);
        if functional.abs() >= SYNTHETIC_MARGIN {
            return (img, usize::from(functional > 0.0));
        }
    }
}

/// Mean red minus mean blue; the linear functional behind synthetic labels.
pub fn red_minus_blue(img: &Array3<f64>) -> f64 {
    let r = img.slice(s![0, .., ..]).mean().unwrap_or(0.0);
    let b = img.slice(s![2, .., ..]).mean().unwrap_or(0.0);
    r - b
}

fn synthetic(size: usize, count: usize, seed: u64) -> Dataset {
    let (images, labels) = (0..count as u64).map(|i| synthetic_item(size, seed, i)).unzip();
    Dataset {
        images,
        labels,
        num_classes: 2,
        image_size: size,
        skipped: 0,
    }
}

/// Bilinear resize with half-pixel centers: destination pixel `d` samples the
/// source at `(d + 0.5) * in / out − 0.5`, clamped to the valid range.
pub fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, in_h, in_w) = img.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return img.clone();
    }
    let coord = |d: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((d as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, src - lo as f64)
    };
    let mut out = Array3::zeros((c, out_h, out_w));
    for y in 0..out_h {
        let (y0, y1, wy) = coord(y, in_h, out_h);
        for x in 0..out_w {
            let (x0, x1, wx) = coord(x, in_w, out_w);
            for ch in 0..c {
                let top = img[[ch, y0, x0]] * (1.0 - wx) + img[[ch, y0, x1]] * wx;
                let bottom = img[[ch, y1, x0]] * (1.0 - wx) + img[[ch, y1, x1]] * wx;
                out[[ch, y, x]] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

pub fn rgb_to_array(img: &RgbImage) -> Array3<f64> {
    Array3::from_shape_fn((3, img.height, img.width), |(c, y, x)| img.data[(y * img.width + x) * 3 + c] as f64 / 255.0)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn is_ppm(p: &Path) -> bool {
    p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// `root/*.ppm` (label 0) or `root/<class>/*.ppm` with classes in sorted
/// directory order.
fn load_image_folder(root: &Path, size: usize) -> Result<Dataset> {
    let entries = sorted_entries(root)?;
    let class_dirs: Vec<&PathBuf> = entries.iter().filter(|p| p.is_dir()).collect();
    let mut files: Vec<(PathBuf, usize)> = entries.iter().filter(|p| is_ppm(p)).map(|p| (p.clone(), 0)).collect();
    for (label, dir) in class_dirs.iter().enumerate() {
        for f in sorted_entries(dir)?.into_iter().filter(|p| is_ppm(p)) {
            files.push((f, label));
        }
    }
    let num_classes = class_dirs.len().max(1);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for (path, label) in files {
        match RgbImage::load(&path) {
            Ok(img) if img.width > 0 && img.height > 0 => {
                images.push(resize_bilinear(&rgb_to_array(&img), size, size));
                labels.push(label);
            }
            Ok(_) => {
                warn!("skipping empty image {}", path.display());
                skipped += 1;
            }
            Err(e) => {
                warn!("skipping unreadable image {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no readable PPM images under {}", root.display())));
    }
    Ok(Dataset {
        images,
        labels,
        num_classes,
        image_size: size,
        skipped,
    })
}

/// Decodes CIFAR record `k` of a binary batch into `(3, 32, 32)` and its label.
pub fn decode_cifar_record(bytes: &[u8], k: usize) -> Result<(Array3<f64>, usize)> {
    let rec = bytes
        .get(k * CIFAR_RECORD..(k + 1) * CIFAR_RECORD)
        .ok_or_else(|| Error::Data(format!("CIFAR record {k} out of range")))?;
    let label = rec[0] as usize;
    if label >= CIFAR_CLASSES {
        return Err(Error::Data(format!("CIFAR record {k} has label {label}")));
    }
    let pixels = &rec[1..];
    let img = Array3::from_shape_fn((3, CIFAR_SIDE, CIFAR_SIDE), |(c, y, x)| {
        pixels[c * CIFAR_SIDE * CIFAR_SIDE + y * CIFAR_SIDE + x] as f64 / 255.0
    });
    Ok((img, label))
}

/// `root` is a single `.bin` batch or a directory of them (sorted by name).
fn load_cifar(root: &Path, size: usize) -> Result<Dataset> {
    let files = if root.is_dir() {
        sorted_entries(root)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect()
    } else {
        vec![root.to_path_buf()]
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut skipped = 0;
    for path in files {
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                warn!("skipping unreadable CIFAR file {}: {e}", path.display());
                skipped += 1;
                continue;
            }
        };
        if bytes.len() % CIFAR_RECORD != 0 {
            warn!(
                "{} has {} trailing bytes; ignoring the partial record",
                path.display(),
                bytes.len() % CIFAR_RECORD
            );
        }
        for k in 0..bytes.len() / CIFAR_RECORD {
            match decode_cifar_record(&bytes, k) {
                Ok((img, label)) => {
                    images.push(resize_bilinear(&img, size, size));
                    labels.push(label);
                }
                Err(e) => {
                    warn!("skipping record in {}: {e}", path.display());
                    skipped += 1;
                }
            }
        }
    }
    if images.is_empty() {
        return Err(Error::Data(format!("no CIFAR records under {}", root.display())));
    }
    Ok(Dataset {
        images,
        labels,
        num_classes: CIFAR_CLASSES,
        image_size: size,
        skipped,
    })
}
