//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4};
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use symmim::data::{Dataset, DatasetSpec};
use symmim::eval::{ablation_config_audit, extract_features, pixel_features, probe_backbone, probe_features, run_ablation};
use symmim::losses::{info_nce, LossFlags};
use symmim::masking::{checkerboard_mask, intersect, random_mask, Phase, TokenMask};
use symmim::model::params::Parameterized;
use symmim::model::{ema_update, momentum_schedule, DualEncoderState, MomentumNet, OnlineNet};
use symmim::patching::{patchify, unpatchify, ImageBatch, PatchBatch};
use symmim::train::step::{draw_masks, momentum_backward, momentum_forward, online_loss, online_loss_value, step_rng};
use symmim::train::{pretrain, train_loop, train_step, RunConfig, TrainState};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn combos() -> Vec<LossFlags> {
    (1u8..8)
        .map(|b| LossFlags {
            rec1: b & 1 != 0,
            rec2: b & 2 != 0,
            con: b & 4 != 0,
        })
        .collect()
}

// 1 ------------------------------------------------------------------------

fn mask_invariants() -> Outcome {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let geometry = (1usize..=4, 1usize..=8, 1usize..=8, proptest::bool::ANY, proptest::num::u64::ANY, 0.0f64..=1.0);
    runner
        .run(&geometry, |(c, a, b, odd, seed, ratio)| {
            let (h, w) = (a * c, b * c);
            let phase = if odd { Phase::Odd } else { Phase::Even };
            let m = checkerboard_mask(h, w, c, phase).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let other = checkerboard_mask(h, w, c, phase.flip()).unwrap();
            let check = |ok: bool, what: &str| {
                if ok {
                    Ok(())
                } else {
                    Err(TestCaseError::fail(format!("{what} fails on {h}x{w} cell {c} {phase}")))
                }
            };
            check(m.complement().bits() == other.bits(), "parity complement")?;
            if a * b % 2 == 0 {
                check(2 * m.masked_count() == h * w, "exact half")?;
            }
            for i in 0..h {
                for j in 0..w {
                    if i + c < h {
                        check(m.get(i + c, j) == other.get(i, j), "row cell shift")?;
                    }
                    if j + c < w {
                        check(m.get(i, j + c) == other.get(i, j), "column cell shift")?;
                    }
                }
            }
            if a % 2 == 0 {
                check(m.roll(c, 0).bits() == other.bits(), "toroidal row roll")?;
            }
            if b % 2 == 0 {
                check(m.roll(0, c).bits() == other.bits(), "toroidal column roll")?;
            }
            let r = random_mask(h, w, ratio, seed).unwrap();
            let mr = intersect(&m, &r).unwrap();
            check(mr.bits() == intersect(&r, &m).unwrap().bits(), "intersect commutes")?;
            check(intersect(&m, &m).unwrap().bits() == m.bits(), "intersect idempotent")?;
            check(intersect(&m, &other).unwrap().masked_count() == 0, "opposite phases disjoint")?;
            check(
                intersect(&m, &TokenMask::all_visible(h, w)).unwrap().masked_count() == 0,
                "intersect with empty mask",
            )?;
            check(mr.masked_count() <= m.masked_count().min(r.masked_count()), "intersect shrinks")?;
            check(r == random_mask(h, w, ratio, seed).unwrap(), "random determinism")?;
            check(m == checkerboard_mask(h, w, c, phase).unwrap(), "checkerboard determinism")?;
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 5.0, || format!("took {secs:.2} s"))?;
    Ok(format!("256 random geometries, 0 failures, {secs:.2} s"))
}

// 2 ------------------------------------------------------------------------

fn info_nce_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let k = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=8);
        let nq = rng.gen_range(1..=8);
        let tau = [0.05, 0.1, 1.0][case % 3];
        let q: Vec<Vec<f64>> = (0..nq).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let keys: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let pos: Vec<usize> = (0..nq).map(|_| rng.gen_range(0..k)).collect();
        let qa = Array2::from_shape_fn((nq, d), |(i, j)| q[i][j]);
        let ka = Array2::from_shape_fn((k, d), |(i, j)| keys[i][j]);
        let got = info_nce(qa.view(), ka.view(), &pos, tau).map_err(|e| e.to_string())?.loss;
        let want = common::info_nce_oracle(&q, &keys, &pos, tau);
        let rel = (got - want).abs() / want.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        ensure(rel <= 1e-6, || format!("case {case}: {got} vs oracle {want}"))?;
    }
    let mut uniform_err: f64 = 0.0;
    for k in 2..=8 {
        for tau in [0.05, 0.1, 1.0] {
            let ka = Array2::from_elem((k, 3), 0.7);
            let qa = Array2::from_shape_vec((1, 3), vec![0.2, -0.5, 0.9]).unwrap();
            let got = info_nce(qa.view(), ka.view(), &[k - 1], tau).map_err(|e| e.to_string())?.loss;
            let err = (got - (k as f64).ln()).abs();
            uniform_err = uniform_err.max(err);
            ensure(err <= 1e-12, || format!("uniform K={k} tau={tau}: {got}"))?;
        }
    }
    Ok(format!("100 instances, max rel err {worst:.1e}; uniform max |err| {uniform_err:.1e}"))
}

// 3 ------------------------------------------------------------------------

struct GradFixture {
    cfg: RunConfig,
    state: DualEncoderState,
    patches: PatchBatch,
}

fn grad_fixture() -> GradFixture {
    let cfg = common::tiny_cfg();
    let mut state = DualEncoderState::init(&cfg.encoder, &cfg.heads, cfg.m_base, 11);
    // momentum weights unlike the online ones, so rec2 and con are non-trivial
    state.momentum = MomentumNet::copy_of(&OnlineNet::init(&cfg.encoder, &cfg.heads, 12));
    let ds = Dataset::open(&DatasetSpec::synthetic(cfg.encoder.image_size, 2, 3)).unwrap();
    let batch = ds.gather(&[0, 1]).images;
    let patches = patchify(&batch, cfg.encoder.patch_size).unwrap();
    GradFixture { cfg, state, patches }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_check() -> Outcome {
    let GradFixture { cfg: base, state, patches } = grad_fixture();
    let n_params = state.online.param_count();
    ensure(n_params <= 5000, || format!("{n_params} parameters"))?;
    let masks = draw_masks(&base, patches.n(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mom = momentum_forward(&state, &patches, &masks.momentum).unwrap();
    let h = 1e-6;
    let mut report = Vec::new();
    let cases = [
        ("rec1", LossFlags { rec1: true, rec2: false, con: false }),
        ("rec2", LossFlags { rec1: false, rec2: true, con: false }),
        ("con", LossFlags { rec1: false, rec2: false, con: true }),
        ("all", LossFlags::ALL),
    ];
    for (name, flags) in cases {
        let cfg = RunConfig { loss_flags: flags, ..base.clone() };
        let analytic = online_loss(&state.online, &patches, &masks, &mom, &cfg, None).map_err(|e| e.to_string())?.grad;
        let grads: Vec<(String, Vec<f64>)> = analytic.params().into_iter().map(|p| (p.name, p.data.to_vec())).collect();
        let mut worst: f64 = 0.0;
        let mut net = state.online.clone();
        for (t, (tensor, g)) in grads.iter().enumerate() {
            let mut fd = vec![0.0; g.len()];
            for (e, slot) in fd.iter_mut().enumerate() {
                let orig = net.params_mut()[t].data[e];
                net.params_mut()[t].data[e] = orig + h;
                let plus = online_loss_value(&net, &patches, &masks, &mom, &cfg).unwrap();
                net.params_mut()[t].data[e] = orig - h;
                let minus = online_loss_value(&net, &patches, &masks, &mom, &cfg).unwrap();
                net.params_mut()[t].data[e] = orig;
                *slot = (plus - minus) / (2.0 * h);
            }
            let diff: Vec<f64> = g.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let scale = norm(g).max(norm(&fd));
            let rel = if scale < 1e-8 { norm(&diff) } else { norm(&diff) / scale };
            ensure(rel <= 1e-4, || format!("{name}: tensor {tensor} rel err {rel:.2e}"))?;
            worst = worst.max(rel);
        }
        report.push(format!("{name} {worst:.1e}"));
    }
    Ok(format!("{n_params} params, max per-tensor rel err: {}", report.join(", ")))
}

// 4 ------------------------------------------------------------------------

fn stop_gradient_audit() -> Outcome {
    let GradFixture { cfg: base, state, patches } = grad_fixture();
    let masks = draw_masks(&base, patches.n(), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mom = momentum_forward(&state, &patches, &masks.momentum).unwrap();
    for flags in combos() {
        let cfg = RunConfig { loss_flags: flags, ..base.clone() };
        let loss = online_loss(&state.online, &patches, &masks, &mom, &cfg, None).map_err(|e| e.to_string())?;
        // what training propagates into the momentum outputs: nothing
        let zero_recon = Array3::zeros(loss.detached.recon.raw_dim());
        let zero_keys = Array2::zeros(loss.detached.keys.raw_dim());
        let g = momentum_backward(&state, &patches, &masks.momentum, &zero_recon, &zero_keys).map_err(|e| e.to_string())?;
        for p in g.params() {
            ensure(p.data.iter().all(|v| *v == 0.0), || format!("{flags}: {} has a nonzero gradient", p.name))?;
        }
        // control: without the detachment the same path is live
        if flags.rec2 || flags.con {
            let live = momentum_backward(&state, &patches, &masks.momentum, &loss.detached.recon, &loss.detached.keys)
                .map_err(|e| e.to_string())?;
            ensure(live.max_abs() > 0.0, || format!("{flags}: control gradient is zero"))?;
        }
    }

    // a full step changes θ_k only through the EMA
    for flags in combos() {
        let cfg = RunConfig { loss_flags: flags, ..base.clone() };
        let mut ts = TrainState::init(&cfg);
        ts.model.momentum = state.momentum.clone();
        let before = ts.model.momentum.clone();
        let batch = unpatchify(&patches, cfg.encoder.patch_size).unwrap();
        let online_before = ts.model.online.param_hash();
        let rec = train_step(&mut ts, &batch, &cfg, &mut step_rng(cfg.seed, 1)).map_err(|e| e.to_string())?;
        ensure(ts.model.online.param_hash() != online_before, || format!("{flags}: optimizer did not move θ_q"))?;
        let mut expected = before.clone();
        ema_update(&mut expected, &ts.model.online, rec.m);
        ensure(expected.param_hash() == ts.model.momentum.param_hash(), || {
            format!("{flags}: θ_k differs from the pure EMA result")
        })?;

        // the optimizer in isolation leaves θ_k bit-identical
        let k_hash = ts.model.momentum.param_hash();
        let grad = ts.model.online.clone();
        ts.opt.step(&mut ts.model.online, &grad, 1e-3);
        ensure(ts.model.momentum.param_hash() == k_hash, || format!("{flags}: optimizer touched θ_k"))?;
    }
    Ok("7 flag combinations: all θ_k gradients exactly 0 (live control nonzero), θ_k hash unchanged by AdamW".into())
}

// 5 ------------------------------------------------------------------------

fn ema_closed_form() -> Outcome {
    let cfg = common::tiny_cfg();
    let online = OnlineNet::init(&cfg.encoder, &cfg.heads, 21);
    let start = MomentumNet::copy_of(&OnlineNet::init(&cfg.encoder, &cfg.heads, 22));
    let mut worst: f64 = 0.0;
    for m in [0.0, 0.9, 0.996] {
        let mut k = start.clone();
        for _ in 0..50 {
            ema_update(&mut k, &online, m);
        }
        let mn = f64::powi(m, 50);
        let view = online.momentum_view();
        for ((got, k0), q) in k.params().iter().zip(start.params()).zip(view.params()) {
            for ((a, b), c) in got.data.iter().zip(k0.data).zip(q.data) {
                let err = (a - (mn * b + (1.0 - mn) * c)).abs();
                worst = worst.max(err);
                ensure(err <= 1e-10, || format!("m={m}: {} off by {err:.2e}", got.name))?;
            }
        }
    }
    for m_base in [0.9, 0.99, 0.996] {
        for total in [1u64, 7, 200, 10_000] {
            let first = momentum_schedule(0, total, m_base);
            let last = momentum_schedule(total, total, m_base);
            ensure(first == m_base && last == 1.0, || {
                format!("schedule({m_base}, {total}) endpoints {first}, {last}")
            })?;
        }
    }
    Ok(format!("max |err| {worst:.1e} over m in {{0, 0.9, 0.996}}; schedule endpoints exact"))
}

// 6 ------------------------------------------------------------------------

fn patch_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..200 {
        let (n, c, p) = (rng.gen_range(1..4), rng.gen_range(1..5), rng.gen_range(1..9));
        let (gh, gw) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let values = Array4::from_shape_fn((n, c, gh * p, gw * p), |_| {
            let v: f64 = rng.gen_range(-1e3..1e3);
            v * f64::powi(2.0, rng.gen_range(-40..40))
        });
        let images = ImageBatch::new(values).unwrap();
        let back = unpatchify(&patchify(&images, p).unwrap(), p).unwrap();
        let exact = back.values.iter().zip(images.values.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(exact, || format!("case {case}: {n}x{c}x{}x{} p={p}", gh * p, gw * p))?;
    }
    Ok("200 randomized shapes, bit-exact".into())
}

// 7 ------------------------------------------------------------------------

fn strip_wall(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn training_sanity() -> Outcome {
    let cfg = RunConfig::default();
    let e = &cfg.encoder;
    ensure(
        e.depth == 4 && e.dim == 64 && e.image_size == 32 && cfg.small_cell == 1 && cfg.large_cell == 2 && cfg.total_steps == 200,
        || "default config is not the desk-scale config".into(),
    )?;
    let ds = Dataset::open(&cfg.dataset_spec()).map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    let mut times = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let out = train_loop(&cfg, &ds, dir.path(), None).map_err(|e| e.to_string())?;
        times.push(start.elapsed().as_secs_f64());
        csvs.push(fs::read_to_string(&out.metrics).unwrap());
    }
    let totals: Vec<f64> = csvs[0]
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(4).unwrap().parse().unwrap())
        .collect();
    ensure(totals.len() == 200, || format!("{} metric rows", totals.len()))?;
    let early = totals[..10].iter().sum::<f64>() / 10.0;
    let late = totals[190..].iter().sum::<f64>() / 10.0;
    let drop = 1.0 - late / early;
    ensure(drop >= 0.30, || format!("loss fell only {:.1}% ({early:.4} -> {late:.4})", 100.0 * drop))?;
    let slowest = times.iter().cloned().fold(0.0, f64::max);
    ensure(slowest <= 600.0, || format!("run took {slowest:.0} s"))?;
    ensure(strip_wall(&csvs[0]) == strip_wall(&csvs[1]), || "rerun metrics differ".into())?;
    Ok(format!(
        "mean total over steps 1-10 {early:.4}, over 191-200 {late:.4} ({:.1}% drop); {:.0} s and {:.0} s; rerun bit-identical",
        100.0 * drop,
        times[0],
        times[1]
    ))
}

// 8, 9, 10 ------------------------------------------------------------------

fn small_cli_cfg() -> RunConfig {
    let mut cfg = common::tiny_cfg();
    cfg.data.limit = Some(48);
    cfg.probe.steps = 100;
    cfg.sweep_steps = 3;
    cfg
}

fn symmim(out: &Path, args: &[&str]) -> Result<String, String> {
    let o = Command::new(env!("CARGO_BIN_EXE_symmim"))
        .args(args)
        .env("SYMMIM_OUT", out)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !o.status.success() {
        return Err(format!("symmim {args:?} exited {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
    }
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn only_run_dir(out: &Path) -> Result<std::path::PathBuf, String> {
    let dirs: Vec<_> = fs::read_dir(out).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    ensure(dirs.len() == 1, || format!("{} run directories", dirs.len()))?;
    Ok(dirs[0].clone())
}

fn ablation_structure() -> Outcome {
    let cfg = small_cli_cfg();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("ablate.cfg");
    fs::write(&path, cfg.to_text()).unwrap();
    let out = tmp.path().join("runs");
    symmim(&out, &["ablate", "--config", path.to_str().unwrap()])?;
    let csv = fs::read_to_string(only_run_dir(&out)?.join("ablation.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<String> = csv.lines().skip(1).map(|l| l.splitn(4, ',').take(3).collect::<Vec<_>>().join("")).collect();
    ensure(rows == ["100", "110", "101", "111"], || format!("rows {rows:?}"))?;

    let ds = Dataset::open(&cfg.dataset_spec()).map_err(|e| e.to_string())?;
    let report = run_ablation(&cfg, &ds).map_err(|e| e.to_string())?;
    let flags: Vec<LossFlags> = report.rows.iter().map(|r| r.flags).collect();
    ensure(flags == LossFlags::ABLATION_ROWS, || format!("{flags:?}"))?;
    let audit = ablation_config_audit(&report.rows);
    ensure(audit == ["loss_flags"], || format!("differing keys {audit:?}"))?;
    Ok("4 rows {rec1}, {rec1,rec2}, {rec1,con}, {rec1,rec2,con}; config diff touches only loss_flags".into())
}

fn sweep_cardinality() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("sweep.cfg");
    fs::write(&path, small_cli_cfg().to_text()).unwrap();
    let out = tmp.path().join("runs");
    symmim(
        &out,
        &["mask-sweep", "--config", path.to_str().unwrap(), "--ratios", "0.25,0.5,0.75", "--strategies", "random,checkerboard"],
    )?;
    let csv = fs::read_to_string(only_run_dir(&out)?.join("sweep.csv")).map_err(|e| e.to_string())?;
    let runs: Vec<(String, String)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    let want = [("random", "0.25"), ("random", "0.5"), ("random", "0.75"), ("checkerboard", "0.5")];
    ensure(
        runs.len() == 4 && runs.iter().zip(want).all(|(a, b)| a.0 == b.0 && a.1 == b.1),
        || format!("runs {runs:?}"),
    )?;
    Ok("3 random ratios + 1 checkerboard = 4 runs".into())
}

fn visualization() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.total_steps = 5;
    cfg.data.limit = Some(64);
    let ds = Dataset::open(&cfg.dataset_spec()).map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().unwrap();
    let trained = train_loop(&cfg, &ds, &tmp.path().join("train"), None).map_err(|e| e.to_string())?;
    let out = tmp.path().join("runs");
    let count = 4;
    let listed = symmim(
        &out,
        &["viz", "--ckpt", trained.final_checkpoint.to_str().unwrap(), "--images", "synthetic", "--count", "4"],
    )?;
    let files: Vec<&str> = listed.lines().collect();
    ensure(files.len() == 4, || format!("{} files", files.len()))?;

    let originals = Dataset::open(&DatasetSpec::synthetic(cfg.encoder.image_size, count, cfg.seed)).map_err(|e| e.to_string())?;
    let (s, p) = (cfg.encoder.image_size, cfg.encoder.patch_size);
    let mut summary = Vec::new();
    for f in &files {
        let (w, h, px) = common::parse_p6(&fs::read(f).map_err(|e| e.to_string())?).map_err(|e| format!("{f}: {e}"))?;
        ensure((w, h) == (3 * s, count * s), || format!("{f}: {w}x{h}"))?;
        let at = |x: usize, y: usize| -> [u8; 3] {
            let i = 3 * (y * w + x);
            [px[i], px[i + 1], px[i + 2]]
        };
        let (mut masked, mut visible) = (0, 0);
        for (b, img) in originals.images.iter().enumerate() {
            for ty in 0..s / p {
                for tx in 0..s / p {
                    let block = || (0..p).flat_map(move |dy| (0..p).map(move |dx| (tx * p + dx, b * s + ty * p + dy)));
                    let hidden = block().all(|(x, y)| at(s + x, y) == [128; 3]);
                    if hidden {
                        masked += 1;
                    } else {
                        visible += 1;
                    }
                    for (x, y) in block() {
                        let iy = y - b * s;
                        let orig = [common::byte(img[[0, iy, x]]), common::byte(img[[1, iy, x]]), common::byte(img[[2, iy, x]])];
                        ensure(at(x, y) == orig, || format!("{f}: original panel differs at ({x}, {y})"))?;
                        if !hidden {
                            ensure(at(2 * s + x, y) == orig && at(s + x, y) == orig, || {
                                format!("{f}: visible pixel ({x}, {y}) altered")
                            })?;
                        }
                    }
                }
            }
        }
        ensure(masked > 0 && visible > 0, || format!("{f}: {masked} masked, {visible} visible tokens"))?;
        let name = Path::new(f).file_name().unwrap().to_string_lossy().into_owned();
        summary.push(format!("{name} {masked}/{}", masked + visible));
    }
    Ok(format!("4 P6 grids, visible pixels bit-identical; masked tokens: {}", summary.join(", ")))
}

// 11 -----------------------------------------------------------------------

fn linear_probe_floor() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.total_steps = 500;
    let train_ds = Dataset::open(&cfg.dataset_spec()).map_err(|e| e.to_string())?;
    let probe_ds = Dataset::open(&DatasetSpec::synthetic(cfg.encoder.image_size, 600, 4242)).map_err(|e| e.to_string())?;

    let pixels = probe_features(&pixel_features(&probe_ds), &probe_ds, &cfg.probe, "pixels").map_err(|e| e.to_string())?;
    ensure(pixels.accuracy >= 0.95, || format!("raw-pixel probe only {:.3}: set is not separable", pixels.accuracy))?;
    let init = TrainState::init(&cfg);
    let init_acc = probe_backbone(&init.model.online.backbone, cfg.encoder.patch_size, &probe_ds, &cfg.probe, "init")
        .map_err(|e| e.to_string())?
        .accuracy;

    let start = Instant::now();
    let (state, _) = pretrain(&cfg, &train_ds).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let backbone = &state.model.online.backbone;
    let trained = probe_backbone(backbone, cfg.encoder.patch_size, &probe_ds, &cfg.probe, "pretrained").map_err(|e| e.to_string())?;
    ensure(trained.accuracy >= 0.95, || format!("pretrained probe accuracy {:.3}", trained.accuracy))?;

    let feats = extract_features(backbone, cfg.encoder.patch_size, &probe_ds).map_err(|e| e.to_string())?;
    let shuffled = probe_ds.with_random_labels(99);
    let control = probe_features(&feats, &shuffled, &cfg.probe, "random-labels").map_err(|e| e.to_string())?;
    let sigma = (0.25 / control.n_eval as f64).sqrt();
    ensure((control.accuracy - 0.5).abs() <= 3.0 * sigma, || {
        format!("random-label accuracy {:.3} outside 0.5 ± {:.3}", control.accuracy, 3.0 * sigma)
    })?;
    Ok(format!(
        "pretrained {:.3} on {} held-out ({secs:.0} s pretrain); random labels {:.3} (0.5 ± {:.3}); raw pixels {:.3}, untrained backbone {:.3}",
        trained.accuracy,
        trained.n_eval,
        control.accuracy,
        3.0 * sigma,
        pixels.accuracy,
        init_acc
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("mask invariants", mask_invariants),
        ("InfoNCE oracle", info_nce_oracle),
        ("gradient check", gradient_check),
        ("stop-gradient audit", stop_gradient_audit),
        ("EMA closed form", ema_closed_form),
        ("patch round-trip", patch_round_trip),
        ("training sanity", training_sanity),
        ("ablation structure", ablation_structure),
        ("sweep cardinality", sweep_cardinality),
        ("visualization", visualization),
        ("linear-probe floor", linear_probe_floor),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("[PASS] {id:>2} {name}: {detail} [{secs:.1} s]"),
            Err(why) => {
                failed += 1;
                println!("[FAIL] {id:>2} {name}: {why} [{secs:.1} s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
