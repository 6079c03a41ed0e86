//! Pretraining: configuration, optimizer, the training step and the loop
//! with checkpointing and metrics.

pub mod config;
pub mod metrics;
pub mod optim;
pub mod step;

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use optim::AdamW;

pub use config::RunConfig;
pub use step::{train_step, StepRecord, TrainState};

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Seed of the per-epoch data shuffles.
pub fn shuffle_seed(cfg: &RunConfig) -> u64 {
    cfg.seed ^ SHUFFLE_SALT
}

pub fn to_checkpoint(state: &TrainState, cfg: &RunConfig) -> Checkpoint {
    let mut ck = Checkpoint::from_state(&cfg.to_text(), &state.model);
    state.opt.export(&mut ck.tensors);
    ck
}

/// Restores a training state, refusing checkpoints written under a different
/// configuration.
pub fn from_checkpoint(ck: &Checkpoint, cfg: &RunConfig) -> Result<TrainState> {
    let stored = RunConfig::from_text(&ck.config)?;
    if stored.hash() != cfg.hash() {
        let keys: Vec<&str> = stored.diff(cfg).into_iter().map(|d| d.0).collect();
        return Err(Error::config(format!(
            "checkpoint config hash {} does not match run config hash {} (differing keys: {})",
            stored.hash(),
            cfg.hash(),
            keys.join(", ")
        )));
    }
    let model = ck.to_state(&cfg.encoder, &cfg.heads)?;
    let opt = AdamW::import(&model.online, cfg.weight_decay, model.step, &ck.tensors)?;
    Ok(TrainState { model, opt })
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.image_size != cfg.encoder.image_size || cfg.encoder.channels != 3 {
        return Err(Error::config(format!(
            "dataset yields 3x{0}x{0} images, encoder expects {1}x{2}x{2}",
            ds.image_size, cfg.encoder.channels, cfg.encoder.image_size
        )));
    }
    Ok(())
}

/// Runs steps until `cfg.total_steps`, calling `on_step` after each one.
fn run_steps(
    state: &mut TrainState,
    cfg: &RunConfig,
    ds: &Dataset,
    mut on_step: impl FnMut(&TrainState, &StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    let mut records = Vec::new();
    let seed = shuffle_seed(cfg);
    while state.model.step < cfg.total_steps {
        let s = state.model.step + 1;
        let batch = ds.batch_at(s - 1, cfg.batch_size, seed);
        let rec = train_step(state, &batch.images, cfg, &mut step::step_rng(cfg.seed, s))?;
        if s % 25 == 0 || s == cfg.total_steps {
            info!(
                "step {s}/{} total {:.4} rec1 {:.4} rec2 {:.4} con {:.4} m {:.5} lr {:.2e}",
                cfg.total_steps, rec.loss.total, rec.loss.rec1, rec.loss.rec2, rec.loss.con, rec.m, rec.lr
            );
        }
        on_step(state, &rec)?;
        records.push(rec);
    }
    Ok(records)
}

/// In-memory pretraining from a fresh state; nothing is written to disk.
pub fn pretrain(cfg: &RunConfig, ds: &Dataset) -> Result<(TrainState, Vec<StepRecord>)> {
    cfg.validate()?;
    check_dataset(cfg, ds)?;
    let mut state = TrainState::init(cfg);
    let records = run_steps(&mut state, cfg, ds, |_, _| Ok(()))?;
    Ok((state, records))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Records of the steps run by this call.
    pub records: Vec<StepRecord>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

fn save(state: &TrainState, cfg: &RunConfig, out_dir: &Path) -> Result<PathBuf> {
    let ck = to_checkpoint(state, cfg);
    let path = checkpoint_path(out_dir, state.model.step);
    ck.save(&path)?;
    ck.save(&out_dir.join("checkpoints").join("latest.ckpt"))?;
    Ok(path)
}

/// Writes the state that produced a non-finite loss plus a short report.
fn write_diagnostic(state: &TrainState, cfg: &RunConfig, out_dir: &Path, err: &Error) {
    let dir = out_dir.join("diagnostic");
    let result = fs::create_dir_all(&dir)
        .map_err(|e| Error::io(&dir, e))
        .and_then(|_| to_checkpoint(state, cfg).save(&dir.join("state_before_step.ckpt")))
        .and_then(|_| {
            let report = format!(
                "{err}\nonline param max |x|: {}\nmomentum param max |x|: {}\n",
                crate::model::params::Parameterized::max_abs(&state.model.online),
                crate::model::params::Parameterized::max_abs(&state.model.momentum),
            );
            fs::write(dir.join("report.txt"), report).map_err(|e| Error::io(&dir, e))
        });
    if let Err(e) = result {
        warn!("could not write diagnostic snapshot: {e}");
    }
}

/// Full pretraining run writing checkpoints and `metrics.csv` under `out_dir`.
///
/// A fresh run saves the step-0 state first. With `resume`, the state is
/// restored from that checkpoint (whose config must hash equal to `cfg`) and
/// the CSV keeps only rows up to the restored step.
pub fn train_loop(cfg: &RunConfig, ds: &Dataset, out_dir: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(cfg, ds)?;
    let mut state = match resume {
        Some(path) => from_checkpoint(&Checkpoint::load(path)?, cfg)?,
        None => TrainState::init(cfg),
    };
    let ck_dir = out_dir.join("checkpoints");
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let metrics = out_dir.join("metrics.csv");
    let mut writer = metrics::MetricsWriter::open(&metrics, state.model.step)?;
    let mut last = if resume.is_none() {
        save(&state, cfg, out_dir)?
    } else {
        checkpoint_path(out_dir, state.model.step)
    };

    let result = run_steps(&mut state, cfg, ds, |st, rec| {
        writer.append(rec).map_err(|e| Error::io(&metrics, e))?;
        let s = st.model.step;
        if (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) || s == cfg.total_steps {
            last = save(st, cfg, out_dir)?;
        }
        Ok(())
    });
    let records = match result {
        Ok(r) => r,
        Err(e @ Error::NonFinite { .. }) => {
            write_diagnostic(&state, cfg, out_dir, &e);
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    if !last.exists() {
        last = save(&state, cfg, out_dir)?;
    }
    Ok(TrainOutcome {
        state,
        records,
        final_checkpoint: last,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::model::{EncoderConfig, HeadsConfig};

    fn tiny_cfg() -> RunConfig {
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
            batch_size: 3,
            total_steps: 6,
            warmup_steps: 2,
            checkpoint_every: 2,
            ..RunConfig::default()
        }
    }

    fn dataset(cfg: &RunConfig) -> Dataset {
        Dataset::open(&DatasetSpec::synthetic(cfg.encoder.image_size, 7, 0)).unwrap()
    }

    fn strip_wall(rs: &[StepRecord]) -> Vec<StepRecord> {
        rs.iter()
            .map(|r| StepRecord {
                wall_ms: 0.0,
                ..r.clone()
            })
            .collect()
    }

    #[test]
    fn zero_steps_writes_initial_checkpoint_only() {
        let mut cfg = tiny_cfg();
        cfg.total_steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let out = train_loop(&cfg, &dataset(&cfg), dir.path(), None).unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.final_checkpoint, checkpoint_path(dir.path(), 0));
        let names: Vec<String> = fs::read_dir(dir.path().join("checkpoints"))
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names.len(), 2);
        assert_eq!(metrics::read_csv(&out.metrics, 1.0).unwrap().len(), 0);
    }

    #[test]
    fn resume_continues_without_duplicates_and_matches_uninterrupted_run() {
        let cfg = tiny_cfg();
        let ds = dataset(&cfg);
        let full_dir = tempfile::tempdir().unwrap();
        let full = train_loop(&cfg, &ds, full_dir.path(), None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        train_loop(&cfg, &ds, dir.path(), None).unwrap();
        let resumed = train_loop(&cfg, &ds, dir.path(), Some(&checkpoint_path(dir.path(), 2))).unwrap();
        let steps: Vec<u64> = resumed.records.iter().map(|r| r.step).collect();
        assert_eq!(steps, [3, 4, 5, 6]);
        let csv = metrics::read_csv(&resumed.metrics, cfg.lambda).unwrap();
        assert_eq!(csv.iter().map(|r| r.step).collect::<Vec<_>>(), [1, 2, 3, 4, 5, 6]);
        assert_eq!(resumed.state, full.state);
        assert_eq!(strip_wall(&csv), strip_wall(&metrics::read_csv(&full.metrics, cfg.lambda).unwrap()));
    }

    #[test]
    fn resume_rejects_other_config() {
        let cfg = tiny_cfg();
        let ds = dataset(&cfg);
        let dir = tempfile::tempdir().unwrap();
        train_loop(&cfg, &ds, dir.path(), None).unwrap();
        let mut other = cfg.clone();
        other.tau = 0.5;
        let err = train_loop(&other, &ds, dir.path(), Some(&checkpoint_path(dir.path(), 2))).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("tau"));
    }

    #[test]
    fn non_finite_loss_leaves_a_diagnostic() {
        let cfg = tiny_cfg();
        let mut ds = dataset(&cfg);
        ds.images.iter_mut().for_each(|im| im[[0, 0, 0]] = f64::NAN);
        let dir = tempfile::tempdir().unwrap();
        let err = train_loop(&cfg, &ds, dir.path(), None).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 1, .. }), "{err}");
        assert!(dir.path().join("diagnostic").join("report.txt").exists());
    }
}
