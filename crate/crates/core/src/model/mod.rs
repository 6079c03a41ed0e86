//! Online and momentum networks.
//!
//! The online network holds the backbone, projector, predictor and the linear
//! pixel reconstruction head. The momentum network holds EMA copies of the
//! backbone (including its mask token) and the projector only.

pub mod checkpoint;
pub mod layers;
pub mod params;
pub mod vit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use layers::{Linear, Mlp};
use params::{join, ParamMut, ParamRef, Parameterized};
pub use vit::{Backbone, EncoderConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadsConfig {
    pub proj_layers: usize,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_layers: usize,
    pub pred_hidden: usize,
    pub pred_out: usize,
}

impl Default for HeadsConfig {
    /// Desk-scale heads.
    fn default() -> Self {
        Self {
            proj_layers: 3,
            proj_hidden: 256,
            proj_out: 64,
            pred_layers: 2,
            pred_hidden: 256,
            pred_out: 64,
        }
    }
}

impl HeadsConfig {
    /// 4096-wide hidden layers with 256-dimensional outputs.
    pub fn full_scale() -> Self {
        Self {
            proj_layers: 3,
            proj_hidden: 4096,
            proj_out: 256,
            pred_layers: 2,
            pred_hidden: 4096,
            pred_out: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj_layers == 0 || self.pred_layers == 0 {
            return Err(Error::config("projector and predictor need at least one layer"));
        }
        if self.proj_hidden == 0 || self.pred_hidden == 0 || self.proj_out == 0 {
            return Err(Error::config("head widths must be positive"));
        }
        if self.proj_out != self.pred_out {
            return Err(Error::config(format!(
                "projector output {} must equal predictor output {}",
                self.proj_out, self.pred_out
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineNet {
    pub backbone: Backbone,
    pub projector: Mlp,
    pub predictor: Mlp,
    /// Linear map from token features to flattened pixel patches.
    pub recon: Linear,
}

impl OnlineNet {
    pub fn init(encoder: &EncoderConfig, heads: &HeadsConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(encoder, &mut rng);
        let projector = Mlp::init(encoder.dim, heads.proj_hidden, heads.proj_out, heads.proj_layers, &mut rng);
        let predictor = Mlp::init(heads.proj_out, heads.pred_hidden, heads.pred_out, heads.pred_layers, &mut rng);
        let recon = Linear::init(encoder.dim, encoder.d_patch(), &mut rng);
        Self {
            backbone,
            projector,
            predictor,
            recon,
        }
    }

    /// The subtree mirrored by the momentum network.
    pub fn momentum_view(&self) -> MomentumView<'_> {
        MomentumView {
            backbone: &self.backbone,
            projector: &self.projector,
        }
    }
}

impl Parameterized for OnlineNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.backbone.collect(&join(prefix, "backbone"), out);
        self.projector.collect(&join(prefix, "projector"), out);
        self.predictor.collect(&join(prefix, "predictor"), out);
        self.recon.collect(&join(prefix, "recon"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.backbone.collect_mut(&join(prefix, "backbone"), out);
        self.projector.collect_mut(&join(prefix, "projector"), out);
        self.predictor.collect_mut(&join(prefix, "predictor"), out);
        self.recon.collect_mut(&join(prefix, "recon"), out);
    }
}

/// Borrowed `(backbone, projector)` subtree of an [`OnlineNet`].
pub struct MomentumView<'a> {
    pub backbone: &'a Backbone,
    pub projector: &'a Mlp,
}

impl MomentumView<'_> {
    pub fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.backbone.collect("backbone", &mut out);
        self.projector.collect("projector", &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumNet {
    pub backbone: Backbone,
    pub projector: Mlp,
}

impl MomentumNet {
    pub fn copy_of(online: &OnlineNet) -> Self {
        Self {
            backbone: online.backbone.clone(),
            projector: online.projector.clone(),
        }
    }
}

impl Parameterized for MomentumNet {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.backbone.collect(&join(prefix, "backbone"), out);
        self.projector.collect(&join(prefix, "projector"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a>>) {
        self.backbone.collect_mut(&join(prefix, "backbone"), out);
        self.projector.collect_mut(&join(prefix, "projector"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoderState {
    pub online: OnlineNet,
    pub momentum: MomentumNet,
    /// Momentum coefficient used by the most recent EMA update.
    pub m: f64,
    pub step: u64,
}

impl DualEncoderState {
    /// Fresh online weights from `seed`; momentum weights start as an exact copy.
    pub fn init(encoder: &EncoderConfig, heads: &HeadsConfig, m: f64, seed: u64) -> Self {
        let online = OnlineNet::init(encoder, heads, seed);
        let momentum = MomentumNet::copy_of(&online);
        Self {
            online,
            momentum,
            m,
            step: 0,
        }
    }

    /// Verifies that the momentum tree mirrors the online backbone + projector
    /// tree name for name and shape for shape.
    pub fn check_structure(&self) -> Result<()> {
        let online: Vec<_> = self
            .online
            .momentum_view()
            .params()
            .into_iter()
            .map(|p| (p.name, p.shape))
            .collect();
        let momentum = self.momentum.layout();
        if online.len() != momentum.len() {
            return Err(Error::Checkpoint(format!(
                "momentum tree has {} tensors, online subtree has {}",
                momentum.len(),
                online.len()
            )));
        }
        for (a, b) in online.iter().zip(&momentum) {
            if a != b {
                return Err(Error::Checkpoint(format!(
                    "momentum tensor {} {:?} does not mirror online tensor {} {:?}",
                    b.0, b.1, a.0, a.1
                )));
            }
        }
        Ok(())
    }

    /// `θ_k ← m θ_k + (1 − m) θ_q` over the momentum subtree, then `step += 1`.
    pub fn ema_update(&mut self, m: f64) {
        ema_update(&mut self.momentum, &self.online, m);
        self.m = m;
        self.step += 1;
    }
}

/// Elementwise EMA of `momentum` toward the matching online tensors.
pub fn ema_update(momentum: &mut MomentumNet, online: &OnlineNet, m: f64) {
    let view = online.momentum_view();
    let src = view.params();
    for (dst, src) in momentum.params_mut().into_iter().zip(src) {
        debug_assert_eq!(dst.name, src.name);
        for (k, q) in dst.data.iter_mut().zip(src.data) {
            *k = m * *k + (1.0 - m) * q;
        }
    }
}

/// Cosine ramp from `m_base` at step 0 to 1 at `total_steps`.
pub fn momentum_schedule(step: u64, total_steps: u64, m_base: f64) -> f64 {
    if total_steps == 0 {
        return m_base;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    1.0 - (1.0 - m_base) * ((std::f64::consts::PI * frac).cos() + 1.0) / 2.0
}
