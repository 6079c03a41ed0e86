//! One optimization step of the dual-encoder objective.
//!
//! The momentum branch runs first, without caches. Its reconstruction and
//! keys enter the online loss as constants, so the online gradient is the
//! exact derivative of the loss with those values held fixed.

use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::losses::{contrastive_loss, loss_rec1, loss_rec2, total_loss, LossBreakdown};
use crate::masking::{MaskSpec, TokenMask};
use crate::model::layers::BranchScales;
use crate::model::params::Parameterized;
use crate::model::{momentum_schedule, DualEncoderState, MomentumNet, OnlineNet};
use crate::patching::{patchify, ImageBatch, PatchBatch};

use super::config::RunConfig;
use super::optim::{lr_at, AdamW};

/// Per-image masks of both branches for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMasks {
    /// Online branch (`M1`).
    pub online: Vec<TokenMask>,
    /// Momentum branch (`M2`).
    pub momentum: Vec<TokenMask>,
}

/// Draws masks for `n` images. Every image and branch gets an independent
/// draw; for checkerboards that is an independent phase.
pub fn draw_masks<R: Rng>(cfg: &RunConfig, n: usize, rng: &mut R) -> Result<StepMasks> {
    let grid = cfg.encoder.grid();
    let (online, momentum) = match cfg.mask_strategy {
        Some(spec) => (spec, spec),
        None => (
            MaskSpec::Checkerboard {
                cell: cfg.small_cell,
                phase: None,
            },
            MaskSpec::Checkerboard {
                cell: cfg.large_cell,
                phase: None,
            },
        ),
    };
    let mut m1 = Vec::with_capacity(n);
    let mut m2 = Vec::with_capacity(n);
    for _ in 0..n {
        m1.push(online.sample(grid, grid, rng)?);
        m2.push(momentum.sample(grid, grid, rng)?);
    }
    Ok(StepMasks {
        online: m1,
        momentum: m2,
    })
}

/// Momentum-branch outputs, treated as constants by the online loss.
#[derive(Debug, Clone)]
pub struct MomentumOutputs {
    /// `(n, t, d_patch)`, produced by the online reconstruction head.
    pub recon: Array3<f64>,
    /// Projector outputs, `(n * t, D)`.
    pub keys: Array2<f64>,
}

fn to_tokens(flat: Array2<f64>, n: usize, t: usize) -> Result<Array3<f64>> {
    let d = flat.ncols();
    flat.into_shape_with_order((n, t, d)).map_err(|e| Error::shape(e.to_string()))
}

fn to_rows(x: &Array3<f64>) -> Result<Array2<f64>> {
    let (n, t, d) = x.dim();
    x.view()
        .into_shape_with_order((n * t, d))
        .map(|v| v.to_owned())
        .map_err(|e| Error::shape(e.to_string()))
}

pub fn momentum_forward(state: &DualEncoderState, patches: &PatchBatch, m2: &[TokenMask]) -> Result<MomentumOutputs> {
    let feats = state.momentum.backbone.features(patches, m2)?;
    let recon = to_tokens(state.online.recon.forward(&feats), patches.n(), patches.tokens())?;
    let (keys, _) = state.momentum.projector.forward(&feats);
    Ok(MomentumOutputs { recon, keys })
}

/// Gradients the loss would send into the momentum outputs if they were not
/// detached. Training drops them; the stop-gradient audit uses them.
#[derive(Debug, Clone)]
pub struct DetachedCotangents {
    pub recon: Array3<f64>,
    pub keys: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct OnlineLoss {
    pub breakdown: LossBreakdown,
    pub grad: OnlineNet,
    pub detached: DetachedCotangents,
}

/// Online forward, loss and backward against fixed momentum outputs.
pub fn online_loss(
    online: &OnlineNet,
    patches: &PatchBatch,
    masks: &StepMasks,
    mom: &MomentumOutputs,
    cfg: &RunConfig,
    drop: Option<&[Option<BranchScales>]>,
) -> Result<OnlineLoss> {
    let flags = cfg.loss_flags;
    let (n, t) = (patches.n(), patches.tokens());
    let m1 = &masks.online;
    let (feats, cache) = online.backbone.forward(patches, m1, drop)?;
    let recon = to_tokens(online.recon.forward(&feats), n, t)?;

    let mut d_recon = Array3::zeros(recon.raw_dim());
    let mut detached_recon = Array3::zeros(recon.raw_dim());
    let mut detached_keys = Array2::zeros(mom.keys.raw_dim());
    let mut rec1 = 0.0;
    let mut rec2 = 0.0;
    let mut con = 0.0;
    let mut empty_intersection = false;
    if flags.rec1 {
        let r = loss_rec1(&recon, &patches.values, m1)?;
        rec1 = r.value;
        d_recon += &r.grad;
    }
    if flags.rec2 {
        let r = loss_rec2(&recon, &mom.recon, m1, &masks.momentum)?;
        rec2 = r.value;
        empty_intersection = r.empty_intersection;
        d_recon += &r.grad;
        // d|a − b|/db = −d|a − b|/da
        detached_recon.scaled_add(-1.0, &r.grad);
    }

    let mut grad = online.zeros_like();
    let mut d_feats = online.recon.backward(&feats, &to_rows(&d_recon)?, &mut grad.recon);
    if flags.con {
        let (proj, proj_cache) = online.projector.forward(&feats);
        let (pred, pred_cache) = online.predictor.forward(&proj);
        let c = contrastive_loss(&pred, &mom.keys, m1, &cfg.contrastive())?;
        con = c.value;
        let d_pred = &c.grad_queries * cfg.lambda;
        detached_keys = &c.grad_keys_undetached * cfg.lambda;
        let d_proj = online.predictor.backward(&pred_cache, &d_pred, &mut grad.predictor);
        d_feats += &online.projector.backward(&proj_cache, &d_proj, &mut grad.projector);
    }
    online.backbone.backward(&cache, &d_feats, &mut grad.backbone);

    let mut breakdown = total_loss(rec1, rec2, con, cfg.lambda, flags);
    breakdown.empty_intersection = empty_intersection;
    Ok(OnlineLoss {
        breakdown,
        grad,
        detached: DetachedCotangents {
            recon: detached_recon,
            keys: detached_keys,
        },
    })
}

/// Loss value only, for finite-difference checks.
pub fn online_loss_value(
    online: &OnlineNet,
    patches: &PatchBatch,
    masks: &StepMasks,
    mom: &MomentumOutputs,
    cfg: &RunConfig,
) -> Result<f64> {
    let flags = cfg.loss_flags;
    let m1 = &masks.online;
    let feats = online.backbone.features(patches, m1)?;
    let recon = to_tokens(online.recon.forward(&feats), patches.n(), patches.tokens())?;
    let rec1 = if flags.rec1 { loss_rec1(&recon, &patches.values, m1)?.value } else { 0.0 };
    let rec2 = if flags.rec2 {
        loss_rec2(&recon, &mom.recon, m1, &masks.momentum)?.value
    } else {
        0.0
    };
    let con = if flags.con {
        let (proj, _) = online.projector.forward(&feats);
        let (pred, _) = online.predictor.forward(&proj);
        contrastive_loss(&pred, &mom.keys, m1, &cfg.contrastive())?.value
    } else {
        0.0
    };
    Ok(total_loss(rec1, rec2, con, cfg.lambda, flags).total)
}

/// Backpropagates cotangents on the momentum outputs into the momentum
/// parameters. With the stop-gradient cotangents (zeros) this must yield an
/// all-zero gradient; with [`DetachedCotangents`] it shows what the
/// stop-gradient removes.
pub fn momentum_backward(
    state: &DualEncoderState,
    patches: &PatchBatch,
    m2: &[TokenMask],
    d_recon: &Array3<f64>,
    d_keys: &Array2<f64>,
) -> Result<MomentumNet> {
    let k = &state.momentum;
    let (feats, cache) = k.backbone.forward(patches, m2, None)?;
    let (_, proj_cache) = k.projector.forward(&feats);
    let mut grad = k.zeros_like();
    let mut d_feats = k.projector.backward(&proj_cache, d_keys, &mut grad.projector);
    // The reconstruction head belongs to the online tree; only its input
    // gradient reaches the momentum backbone.
    let mut scratch = state.online.recon.zeros_like();
    d_feats += &state.online.recon.backward(&feats, &to_rows(d_recon)?, &mut scratch);
    k.backbone.backward(&cache, &d_feats, &mut grad.backbone);
    Ok(grad)
}

/// Metrics of one completed step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub m: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Online and momentum weights plus optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DualEncoderState,
    pub opt: AdamW,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Self {
        let model = DualEncoderState::init(&cfg.encoder, &cfg.heads, cfg.m_base, cfg.seed);
        let opt = AdamW::new(&model.online, cfg.weight_decay);
        Self { model, opt }
    }
}

/// Step randomness: one independent stream per 1-based step index.
pub fn step_rng(seed: u64, step: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Masks, momentum forward, online loss and backward, AdamW on the online
/// weights, then the EMA update. Returns the record of the completed step.
pub fn train_step<R: Rng>(state: &mut TrainState, batch: &ImageBatch, cfg: &RunConfig, rng: &mut R) -> Result<StepRecord> {
    let start = Instant::now();
    let step = state.model.step + 1;
    let patches = patchify(batch, cfg.encoder.patch_size)?;
    let masks = draw_masks(cfg, batch.n(), rng)?;
    let drop = state.model.online.backbone.sample_drop_path(&cfg.encoder, batch.n(), rng);
    let mom = momentum_forward(&state.model, &patches, &masks.momentum)?;
    let out = online_loss(&state.model.online, &patches, &masks, &mom, cfg, drop.as_deref())?;
    if !out.breakdown.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("{:?}", out.breakdown),
        });
    }
    let lr = lr_at(step, cfg.warmup_steps, cfg.total_steps, cfg.lr);
    state.opt.step(&mut state.model.online, &out.grad, lr);
    let m = momentum_schedule(step - 1, cfg.total_steps, cfg.m_base);
    state.model.ema_update(m);
    Ok(StepRecord {
        step,
        loss: out.breakdown,
        m,
        lr,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
