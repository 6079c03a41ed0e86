//! Run configuration as a flat `key = value` file.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. Every key is optional and falls back to the desk-scale default,
//! but unknown and repeated keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::data::{DataSource, DatasetSpec};
use crate::error::{Error, Result};
use crate::losses::{ContrastiveConfig, KeyScope, LossFlags};
use crate::masking::MaskSpec;
use crate::model::{EncoderConfig, HeadsConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: PathBuf,
    pub limit: Option<usize>,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            root: PathBuf::new(),
            limit: Some(512),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    /// Full-batch gradient steps of the softmax classifier.
    pub steps: usize,
    pub lr: f64,
    pub l2: f64,
    /// Share of the labeled set used to fit the probe; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            l2: 1e-4,
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub heads: HeadsConfig,
    /// Checkerboard cell (in tokens) of the online branch.
    pub small_cell: usize,
    /// Checkerboard cell (in tokens) of the momentum branch.
    pub large_cell: usize,
    pub tau: f64,
    pub lambda: f64,
    pub m_base: f64,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_flags: LossFlags,
    pub key_scope: KeyScope,
    /// Baseline masking for both branches instead of the two checkerboards.
    pub mask_strategy: Option<MaskSpec>,
    /// 0 keeps only the initial and final checkpoints.
    pub checkpoint_every: u64,
    pub data: DataConfig,
    pub probe: ProbeConfig,
    /// Pretraining steps per point of a masking-ratio sweep.
    pub sweep_steps: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            heads: HeadsConfig::default(),
            small_cell: 1,
            large_cell: 2,
            tau: 0.1,
            lambda: 1.0,
            m_base: 0.99,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_steps: 10,
            total_steps: 200,
            batch_size: 16,
            seed: 0,
            loss_flags: LossFlags::ALL,
            key_scope: KeyScope::SameImage,
            mask_strategy: None,
            checkpoint_every: 100,
            data: DataConfig::default(),
            probe: ProbeConfig::default(),
            sweep_steps: 300,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value '{value}' for {key}")))
}

fn optional_usize(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn contrastive(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            key_scope: self.key_scope,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            source: self.data.source,
            root: self.data.root.clone(),
            image_size: self.encoder.image_size,
            limit: self.data.limit,
            seed: self.data.seed,
            split: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate()?;
        let grid = self.encoder.grid();
        if self.small_cell == 0 {
            return Err(Error::config("small_cell must be positive"));
        }
        if self.small_cell >= self.large_cell {
            return Err(Error::config(format!(
                "small_cell ({}) must be smaller than large_cell ({})",
                self.small_cell, self.large_cell
            )));
        }
        for (name, cell) in [("small_cell", self.small_cell), ("large_cell", self.large_cell)] {
            if grid % cell != 0 {
                return Err(Error::config(format!("{name} ({cell}) does not divide the token grid ({grid})")));
            }
        }
        self.contrastive().validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.m_base) {
            return Err(Error::config("m_base must lie in [0, 1)"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !self.loss_flags.any() {
            return Err(Error::config("loss_flags enables no loss term"));
        }
        if let Some(spec) = &self.mask_strategy {
            spec.validate(grid, grid)?;
        }
        if self.data.source != DataSource::Synthetic && self.data.root.as_os_str().is_empty() {
            return Err(Error::config(format!("data.root is required for data.source = {}", self.data.source)));
        }
        if !(self.probe.train_fraction > 0.0 && self.probe.train_fraction < 1.0) {
            return Err(Error::config("probe.train_fraction must lie in (0, 1)"));
        }
        if !(self.probe.lr > 0.0) || !(self.probe.l2 >= 0.0) {
            return Err(Error::config("probe.lr must be positive and probe.l2 non-negative"));
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "encoder.depth" => self.encoder.depth = parse(key, v)?,
            "encoder.dim" => self.encoder.dim = parse(key, v)?,
            "encoder.heads" => self.encoder.heads = parse(key, v)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = parse(key, v)?,
            "encoder.patch_size" => self.encoder.patch_size = parse(key, v)?,
            "encoder.image_size" => self.encoder.image_size = parse(key, v)?,
            "encoder.channels" => self.encoder.channels = parse(key, v)?,
            "encoder.drop_path" => self.encoder.drop_path = parse(key, v)?,
            "heads.proj_layers" => self.heads.proj_layers = parse(key, v)?,
            "heads.proj_hidden" => self.heads.proj_hidden = parse(key, v)?,
            "heads.proj_out" => self.heads.proj_out = parse(key, v)?,
            "heads.pred_layers" => self.heads.pred_layers = parse(key, v)?,
            "heads.pred_hidden" => self.heads.pred_hidden = parse(key, v)?,
            "heads.pred_out" => self.heads.pred_out = parse(key, v)?,
            "small_cell" => self.small_cell = parse(key, v)?,
            "large_cell" => self.large_cell = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "m_base" => self.m_base = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "loss_flags" => self.loss_flags = v.parse()?,
            "key_scope" => self.key_scope = v.parse()?,
            "mask_strategy" => {
                self.mask_strategy = match v {
                    "checkerboard" => None,
                    other => Some(other.parse()?),
                }
            }
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "data.source" => self.data.source = v.parse()?,
            "data.root" => self.data.root = PathBuf::from(v),
            "data.limit" => self.data.limit = optional_usize(key, v)?,
            "data.seed" => self.data.seed = parse(key, v)?,
            "probe.steps" => self.probe.steps = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "probe.l2" => self.probe.l2 = parse(key, v)?,
            "probe.train_fraction" => self.probe.train_fraction = parse(key, v)?,
            "probe.seed" => self.probe.seed = parse(key, v)?,
            "sweep_steps" => self.sweep_steps = parse(key, v)?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Every key in canonical order with its current value.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.encoder;
        let h = &self.heads;
        vec![
            ("encoder.depth", e.depth.to_string()),
            ("encoder.dim", e.dim.to_string()),
            ("encoder.heads", e.heads.to_string()),
            ("encoder.mlp_ratio", e.mlp_ratio.to_string()),
            ("encoder.patch_size", e.patch_size.to_string()),
            ("encoder.image_size", e.image_size.to_string()),
            ("encoder.channels", e.channels.to_string()),
            ("encoder.drop_path", e.drop_path.to_string()),
            ("heads.proj_layers", h.proj_layers.to_string()),
            ("heads.proj_hidden", h.proj_hidden.to_string()),
            ("heads.proj_out", h.proj_out.to_string()),
            ("heads.pred_layers", h.pred_layers.to_string()),
            ("heads.pred_hidden", h.pred_hidden.to_string()),
            ("heads.pred_out", h.pred_out.to_string()),
            ("small_cell", self.small_cell.to_string()),
            ("large_cell", self.large_cell.to_string()),
            ("tau", self.tau.to_string()),
            ("lambda", self.lambda.to_string()),
            ("m_base", self.m_base.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("loss_flags", self.loss_flags.to_string()),
            ("key_scope", self.key_scope.to_string()),
            (
                "mask_strategy",
                self.mask_strategy
                    .map_or_else(|| "checkerboard".to_string(), |s| s.to_string()),
            ),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("data.source", self.data.source.to_string()),
            ("data.root", self.data.root.display().to_string()),
            ("data.limit", self.data.limit.map_or_else(|| "none".to_string(), |l| l.to_string())),
            ("data.seed", self.data.seed.to_string()),
            ("probe.steps", self.probe.steps.to_string()),
            ("probe.lr", self.probe.lr.to_string()),
            ("probe.l2", self.probe.l2.to_string()),
            ("probe.train_fraction", self.probe.train_fraction.to_string()),
            ("probe.seed", self.probe.seed.to_string()),
            ("sweep_steps", self.sweep_steps.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses a config file body. Values are not validated here.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key '{key}'", lineno + 1)));
            }
            cfg.set(key, value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// `(key, self value, other value)` for every key whose values differ.
    pub fn diff(&self, other: &RunConfig) -> Vec<(&'static str, String, String)> {
        self.entries()
            .into_iter()
            .zip(other.entries())
            .filter(|(a, b)| a.1 != b.1)
            .map(|((k, a), (_, b))| (k, a, b))
            .collect()
    }
}
