//! Representation quality: linear probes on frozen features, the loss-term
//! ablation, and the masking-ratio sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use ndarray::{Array1, Array2, Axis};

use crate::data::{split_indices, Dataset};
use crate::error::{Error, Result};
use crate::losses::LossFlags;
use crate::masking::{MaskSpec, TokenMask};
use crate::model::checkpoint::Checkpoint;
use crate::model::params::Parameterized;
use crate::model::Backbone;
use crate::patching::patchify;
use crate::train::config::{ProbeConfig, RunConfig};
use crate::train::pretrain;

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub config_id: String,
    pub accuracy: f64,
    pub n_eval: usize,
    pub seed: u64,
}

/// Mean-pooled final features of every image with no tokens masked.
pub fn extract_features(backbone: &Backbone, patch_size: usize, ds: &Dataset) -> Result<Array2<f64>> {
    let grid = ds.image_size / patch_size;
    let mut rows = Vec::with_capacity(ds.len());
    for batch in ds.sequential(64) {
        let patches = patchify(&batch.images, patch_size)?;
        let masks = vec![TokenMask::all_visible(grid, grid); batch.labels.len()];
        let feats = backbone.features(&patches, &masks)?;
        rows.push(Backbone::mean_pool(&feats, patches.tokens()));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| Error::shape(e.to_string()))
}

/// Flattened pixels, one row per image.
pub fn pixel_features(ds: &Dataset) -> Array2<f64> {
    let d = 3 * ds.image_size * ds.image_size;
    Array2::from_shape_fn((ds.len(), d), |(i, j)| ds.images[i].as_slice().expect("contiguous")[j])
}

/// Multinomial logistic regression fitted by full-batch gradient descent
/// on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxProbe {
    mean: Array1<f64>,
    std: Array1<f64>,
    w: Array2<f64>,
    b: Array1<f64>,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

impl SoftmaxProbe {
    pub fn fit(x: &Array2<f64>, labels: &[usize], classes: usize, cfg: &ProbeConfig) -> Self {
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        let xs = (x - &mean) / &std;
        let n = x.nrows() as f64;
        let mut onehot = Array2::zeros((x.nrows(), classes));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        let mut w = Array2::zeros((x.ncols(), classes));
        let mut b = Array1::zeros(classes);
        for _ in 0..cfg.steps {
            let mut p = xs.dot(&w) + &b;
            softmax_rows(&mut p);
            let err = (p - &onehot) / n;
            let gw = xs.t().dot(&err) + &(&w * cfg.l2);
            let gb = err.sum_axis(Axis(0));
            w.scaled_add(-cfg.lr, &gw);
            b.scaled_add(-cfg.lr, &gb);
        }
        Self { mean, std, w, b }
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let logits = ((x - &self.mean) / &self.std).dot(&self.w) + &self.b;
        logits
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect()
    }
}

fn check_labels(ds: &Dataset, train: &[usize]) -> Result<()> {
    if ds.num_classes < 2 {
        return Err(Error::config(format!("probe needs at least 2 classes, dataset has {}", ds.num_classes)));
    }
    if let Some(l) = ds.labels.iter().find(|&&l| l >= ds.num_classes) {
        return Err(Error::config(format!(
            "class count mismatch: label {l} with {} classes",
            ds.num_classes
        )));
    }
    let mut present = vec![false; ds.num_classes];
    for &i in train {
        present[ds.labels[i]] = true;
    }
    if let Some(missing) = present.iter().position(|p| !p) {
        return Err(Error::config(format!(
            "class count mismatch: class {missing} of {} has no probe training example",
            ds.num_classes
        )));
    }
    Ok(())
}

/// Fits a probe on the train part of a seeded split of `features` and
/// reports accuracy on the rest.
pub fn probe_features(features: &Array2<f64>, ds: &Dataset, cfg: &ProbeConfig, config_id: &str) -> Result<ProbeResult> {
    let (train, eval) = split_indices(ds.len(), cfg.train_fraction, cfg.seed);
    if eval.is_empty() {
        return Err(Error::Data("probe split leaves no evaluation examples".into()));
    }
    check_labels(ds, &train)?;
    let labels = |idx: &[usize]| idx.iter().map(|&i| ds.labels[i]).collect::<Vec<_>>();
    let probe = SoftmaxProbe::fit(&features.select(Axis(0), &train), &labels(&train), ds.num_classes, cfg);
    let predicted = probe.predict(&features.select(Axis(0), &eval));
    let correct = predicted.iter().zip(labels(&eval)).filter(|(p, l)| **p == *l).count();
    Ok(ProbeResult {
        config_id: config_id.to_string(),
        accuracy: correct as f64 / eval.len() as f64,
        n_eval: eval.len(),
        seed: cfg.seed,
    })
}

/// Linear probe on a frozen backbone. Errors if the backbone changes.
pub fn probe_backbone(
    backbone: &Backbone,
    patch_size: usize,
    ds: &Dataset,
    cfg: &ProbeConfig,
    config_id: &str,
) -> Result<ProbeResult> {
    let before = backbone.param_hash();
    let features = extract_features(backbone, patch_size, ds)?;
    let result = probe_features(&features, ds, cfg, config_id)?;
    if backbone.param_hash() != before {
        return Err(Error::Data("backbone parameters changed during probing".into()));
    }
    Ok(result)
}

/// Probes the online backbone stored in a checkpoint.
pub fn linear_probe(ck: &Checkpoint, ds: &Dataset, probe: &ProbeConfig) -> Result<ProbeResult> {
    let cfg = RunConfig::from_text(&ck.config)?;
    if ds.image_size != cfg.encoder.image_size {
        return Err(Error::config(format!(
            "dataset image size {} does not match checkpoint image size {}",
            ds.image_size, cfg.encoder.image_size
        )));
    }
    let state = ck.to_state(&cfg.encoder, &cfg.heads)?;
    probe_backbone(&state.online.backbone, cfg.encoder.patch_size, ds, probe, &cfg.hash()[..12])
}

fn pretrain_and_probe(cfg: &RunConfig, ds: &Dataset, config_id: &str) -> Result<ProbeResult> {
    let (state, _) = pretrain(cfg, ds)?;
    probe_backbone(&state.model.online.backbone, cfg.encoder.patch_size, ds, &cfg.probe, config_id)
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub flags: LossFlags,
    pub config: RunConfig,
    pub result: ProbeResult,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

/// Keys that differ between any ablation row and the first row. Only
/// `loss_flags` may appear.
pub fn ablation_config_audit(rows: &[AblationRow]) -> Vec<&'static str> {
    let mut keys: Vec<&'static str> = Vec::new();
    if let Some(first) = rows.first() {
        for r in rows {
            for (k, _, _) in first.config.diff(&r.config) {
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
        }
    }
    keys
}

/// The four loss-term combinations, each pretrained from the same seed for
/// the same number of steps and then probed.
pub fn run_ablation(base: &RunConfig, ds: &Dataset) -> Result<AblationReport> {
    let configs: Vec<RunConfig> = LossFlags::ABLATION_ROWS
        .iter()
        .map(|&flags| RunConfig {
            loss_flags: flags,
            ..base.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(configs.len());
    for config in configs {
        info!("ablation row {}", config.loss_flags);
        let result = pretrain_and_probe(&config, ds, &config.loss_flags.to_string())?;
        rows.push(AblationRow {
            flags: config.loss_flags,
            config,
            result,
        });
    }
    let audit = ablation_config_audit(&rows);
    if audit.iter().any(|k| *k != "loss_flags") {
        return Err(Error::config(format!("ablation rows differ beyond loss_flags: {audit:?}")));
    }
    Ok(AblationReport { rows })
}

impl AblationReport {
    pub const CSV_HEADER: &'static str = "rec1,rec2,con,accuracy,n_eval,seed,steps";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.flags.rec1 as u8,
                r.flags.rec2 as u8,
                r.flags.con as u8,
                r.result.accuracy,
                r.result.n_eval,
                r.config.seed,
                r.config.total_steps
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mark = |b: bool| if b { "yes" } else { "no" };
        let mut out = String::from("| rec1 | rec2 | con | probe acc |\n|------|------|-----|-----------|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {:<4} | {:<4} | {:<3} | {:>9.4} |",
                mark(r.flags.rec1),
                mark(r.flags.rec2),
                mark(r.flags.con),
                r.result.accuracy
            );
        }
        if let Some(r) = self.rows.first() {
            let _ = writeln!(
                out,
                "\nDesk-scale linear-probe accuracy ({} pretraining steps, seed {}, {} held-out images). \
                 Not comparable to full-scale fine-tuning accuracy.",
                r.config.total_steps, r.config.seed, r.result.n_eval
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub strategy: String,
    pub ratio: f64,
    pub accuracy: f64,
    pub steps: u64,
    pub seed: u64,
}

pub const SWEEP_HEADER: &str = "strategy,ratio,accuracy,steps,seed";

pub const SWEEP_STRATEGIES: [&str; 4] = ["random", "block", "central", "checkerboard"];

/// The runs a sweep performs: one per (strategy, ratio) for baselines and a
/// single fixed-ratio run for the checkerboard. `None` means the two-cell
/// checkerboard pair of the base config.
pub fn sweep_plan(ratios: &[f64], strategies: &[String]) -> Result<Vec<(String, f64, Option<MaskSpec>)>> {
    for r in ratios {
        if !(*r > 0.0 && *r < 1.0) {
            return Err(Error::config(format!("masking ratio {r} outside (0, 1)")));
        }
    }
    let mut plan = Vec::new();
    for s in strategies {
        match s.as_str() {
            "checkerboard" => plan.push((s.clone(), 0.5, None)),
            "random" | "block" | "central" => {
                if ratios.is_empty() {
                    return Err(Error::config(format!("strategy {s} needs at least one ratio")));
                }
                for &ratio in ratios {
                    let spec = match s.as_str() {
                        "random" => MaskSpec::Random { ratio },
                        "block" => MaskSpec::Block { ratio },
                        _ => MaskSpec::Central { ratio },
                    };
                    plan.push((s.clone(), ratio, Some(spec)));
                }
            }
            other => {
                return Err(Error::config(format!(
                    "unknown strategy '{other}', expected one of {}",
                    SWEEP_STRATEGIES.join(", ")
                )))
            }
        }
    }
    Ok(plan)
}

/// Short pretraining plus probe for every point of [`sweep_plan`].
pub fn masking_ratio_probe(base: &RunConfig, ds: &Dataset, ratios: &[f64], strategies: &[String]) -> Result<Vec<SweepPoint>> {
    let plan = sweep_plan(ratios, strategies)?;
    let configs: Vec<RunConfig> = plan
        .iter()
        .map(|(_, _, spec)| RunConfig {
            mask_strategy: *spec,
            total_steps: base.sweep_steps,
            ..base.clone()
        })
        .collect();
    for c in &configs {
        c.validate()?;
    }
    let mut points = Vec::with_capacity(plan.len());
    for ((strategy, ratio, _), cfg) in plan.into_iter().zip(configs) {
        info!("sweep point {strategy} @ {ratio}");
        let result = pretrain_and_probe(&cfg, ds, &format!("{strategy}@{ratio}"))?;
        points.push(SweepPoint {
            strategy,
            ratio,
            accuracy: result.accuracy,
            steps: cfg.total_steps,
            seed: cfg.seed,
        });
    }
    Ok(points)
}

pub fn sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{},{}", p.strategy, p.ratio, p.accuracy, p.steps, p.seed);
    }
    out
}

pub fn sweep_from_csv(text: &str) -> Result<Vec<SweepPoint>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(SWEEP_HEADER) {
        return Err(Error::Data("sweep CSV lacks its header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Data(format!("bad sweep row '{l}'"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(SweepPoint {
                strategy: f[0].to_string(),
                ratio: f[1].parse().map_err(|_| bad())?,
                accuracy: f[2].parse().map_err(|_| bad())?,
                steps: f[3].parse().map_err(|_| bad())?,
                seed: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
