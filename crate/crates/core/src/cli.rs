//! Command-line front end.
//!
//! Exit codes: 0 success, 1 invalid input (usage, config or geometry), 2
//! runtime failure. Every command validates its inputs before creating its
//! output directory, which is a fresh timestamped folder under `$SYMMIM_OUT`
//! (default `runs`) holding the effective config and all outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::data::{DataSource, Dataset, DatasetSpec};
use crate::error::{Error, Result};
use crate::eval::{linear_probe, masking_ratio_probe, run_ablation, sweep_to_csv, write_text};
use crate::masking::{checkerboard_mask, Phase};
use crate::model::checkpoint::Checkpoint;
use crate::train::{train_loop, RunConfig};
use crate::viz::{default_specs, render_mask, render_reconstructions};

pub const OUT_ENV: &str = "SYMMIM_OUT";

#[derive(Debug, Parser)]
#[command(name = "symmim", version, about = "Checkerboard-masked image modeling with a momentum encoder")]
pub struct Cli {
    /// Overrides the seed of the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain from a config file.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint; its config must match.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe of a checkpoint's online backbone.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synthetic`, a PPM class-folder tree, or CIFAR-10 `.bin` batches.
        #[arg(long)]
        data: String,
        /// Number of images to use (synthetic data defaults to 600).
        #[arg(long)]
        limit: Option<usize>,
        /// Replace labels with random ones (chance-level control).
        #[arg(long)]
        random_labels: bool,
    },
    /// Pretrain and probe the four loss-term combinations.
    Ablate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Short pretrain + probe over masking strategies and ratios.
    MaskSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1.., default_value = "random,checkerboard")]
        strategies: Vec<String>,
    },
    /// Reconstruction grids for random and checkerboard masks.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        /// `synthetic` or a directory of PPM images.
        #[arg(long)]
        images: String,
        /// Images per grid.
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Print a checkerboard mask in its text form.
    MaskShow {
        /// `HxW` in tokens.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        cell: usize,
        #[arg(long)]
        phase: String,
        /// Also write the mask as a PPM picture to this path.
        #[arg(long)]
        ppm: Option<PathBuf>,
        /// Pixels per token in the PPM picture.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
}

pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::config(format!("grid '{s}' is not of the form HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

/// Root directory for run outputs.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

/// Creates `<root>/<command>-<timestamp>[-k]`, never reusing a directory.
pub fn fresh_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    for k in 0.. {
        let name = if k == 0 {
            format!("{command}-{stamp}")
        } else {
            format!("{command}-{stamp}-{k}")
        };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded search always returns")
}

fn start_run(command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = fresh_run_dir(&out_root(), command)?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    info!("writing to {}", dir.display());
    Ok(dir)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::config(format!("cannot read config {}: {source}", path.display())),
        other => other,
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_checkpoint(path: &Path) -> Result<(Checkpoint, RunConfig)> {
    let ck = Checkpoint::load(path).map_err(|e| match e {
        Error::Io { path, source } => Error::config(format!("cannot read checkpoint {}: {source}", path.display())),
        other => other,
    })?;
    let cfg = RunConfig::from_text(&ck.config)?;
    Ok((ck, cfg))
}

/// Dataset for `--data` / `--images`: `synthetic`, a CIFAR `.bin` file or a
/// directory holding them, or a PPM folder.
fn data_spec(arg: &str, image_size: usize, limit: Option<usize>, seed: u64) -> Result<DatasetSpec> {
    if arg == "synthetic" {
        return Ok(DatasetSpec::synthetic(image_size, limit.unwrap_or(600), seed));
    }
    let root = PathBuf::from(arg);
    if !root.exists() {
        return Err(Error::config(format!("data path {} does not exist", root.display())));
    }
    let has_bin = root.is_dir()
        && fs::read_dir(&root)
            .map_err(|e| Error::io(&root, e))?
            .filter_map(|e| e.ok())
            .any(|e| e.path().extension().is_some_and(|x| x == "bin"));
    let source = if root.is_file() || has_bin {
        DataSource::CifarBinary
    } else {
        DataSource::ImageFolder
    };
    Ok(DatasetSpec {
        source,
        root,
        image_size,
        limit,
        seed,
        split: None,
    })
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, resume } => {
            let cfg = load_config(&config, cli.seed)?;
            if let Some(r) = &resume {
                let (ck, _) = load_checkpoint(r)?;
                crate::train::from_checkpoint(&ck, &cfg)?;
            }
            let ds = Dataset::open(&cfg.dataset_spec())?;
            let dir = start_run("pretrain", &cfg)?;
            let out = train_loop(&cfg, &ds, &dir, resume.as_deref())?;
            println!("final checkpoint: {}", out.final_checkpoint.display());
            println!("metrics: {}", out.metrics.display());
        }
        Command::Probe {
            ckpt,
            data,
            limit,
            random_labels,
        } => {
            let (ck, mut cfg) = load_checkpoint(&ckpt)?;
            if let Some(s) = cli.seed {
                cfg.probe.seed = s;
            }
            let spec = data_spec(&data, cfg.encoder.image_size, limit, cfg.probe.seed)?;
            let mut ds = Dataset::open(&spec)?;
            if random_labels {
                ds = ds.with_random_labels(cfg.probe.seed);
            }
            let result = linear_probe(&ck, &ds, &cfg.probe)?;
            let dir = start_run("probe", &cfg)?;
            let report = format!(
                "config_id,accuracy,n_eval,seed,random_labels\n{},{},{},{},{}\n",
                result.config_id, result.accuracy, result.n_eval, result.seed, random_labels
            );
            write_text(&dir.join("probe.csv"), &report)?;
            println!("accuracy {:.4} on {} held-out images", result.accuracy, result.n_eval);
        }
        Command::Ablate { config } => {
            let cfg = load_config(&config, cli.seed)?;
            let ds = Dataset::open(&cfg.dataset_spec())?;
            let dir = start_run("ablate", &cfg)?;
            let report = run_ablation(&cfg, &ds)?;
            write_text(&dir.join("ablation.csv"), &report.to_csv())?;
            let table = report.to_table();
            write_text(&dir.join("ablation.txt"), &table)?;
            print!("{table}");
        }
        Command::MaskSweep {
            config,
            ratios,
            strategies,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            crate::eval::sweep_plan(&ratios, &strategies)?;
            let ds = Dataset::open(&cfg.dataset_spec())?;
            let dir = start_run("mask-sweep", &cfg)?;
            let points = masking_ratio_probe(&cfg, &ds, &ratios, &strategies)?;
            let csv = sweep_to_csv(&points);
            write_text(&dir.join("sweep.csv"), &csv)?;
            print!("{csv}");
        }
        Command::Viz { ckpt, images, count } => {
            let (ck, cfg) = load_checkpoint(&ckpt)?;
            if count == 0 {
                return Err(Error::config("--count must be positive"));
            }
            let seed = cli.seed.unwrap_or(cfg.seed);
            let spec = data_spec(&images, cfg.encoder.image_size, None, seed)?;
            let ds = Dataset::open(&DatasetSpec {
                limit: (spec.source == DataSource::Synthetic).then_some(count),
                ..spec
            })?;
            let take: Vec<usize> = (0..count.min(ds.len())).collect();
            let batch = ds.gather(&take).images;
            let grid = cfg.encoder.grid();
            for s in default_specs() {
                s.validate(grid, grid)?;
            }
            let dir = start_run("viz", &cfg)?;
            for path in render_reconstructions(&ck, &batch, &default_specs(), seed, &dir)? {
                println!("{}", path.display());
            }
        }
        Command::MaskShow {
            grid,
            cell,
            phase,
            ppm,
            scale,
        } => {
            let (h, w) = parse_grid(&grid)?;
            let phase: Phase = phase.parse()?;
            let mask = checkerboard_mask(h, w, cell, phase)?;
            if scale == 0 {
                return Err(Error::config("--scale must be positive"));
            }
            print!("{}", mask.to_text());
            if let Some(path) = ppm {
                render_mask(&mask, scale).save(&path)?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}
