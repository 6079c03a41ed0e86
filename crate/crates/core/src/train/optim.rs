//! AdamW with decoupled weight decay, and the warmup + cosine learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::model::checkpoint::{export, import, NamedTensor};
use crate::model::params::Parameterized;
use crate::model::OnlineNet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Weight decay applies to linear-layer matrices only; biases, norms, the
/// mask token and positional embeddings are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    m: OnlineNet,
    v: OnlineNet,
}

impl AdamW {
    pub fn new(params: &OnlineNet, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut OnlineNet, grads: &OnlineNet, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let grads = grads.params();
        let iter = params
            .params_mut()
            .into_iter()
            .zip(grads)
            .zip(self.m.params_mut())
            .zip(self.v.params_mut());
        for (((p, g), m), v) in iter {
            debug_assert_eq!(p.name, g.name);
            let wd = if decays(&p.name) { self.weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * gi;
                v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * gi * gi;
                let update = (m.data[i] / bc1) / ((v.data[i] / bc2).sqrt() + EPS);
                p.data[i] -= lr * (update + wd * p.data[i]);
            }
        }
    }

    pub fn export(&self, out: &mut Vec<NamedTensor>) {
        export(&self.m, "opt.m.", out);
        export(&self.v, "opt.v.", out);
    }

    /// Restores the moments from checkpoint tensors; `t` is the number of
    /// completed training steps.
    pub fn import(params: &OnlineNet, weight_decay: f64, t: u64, tensors: &[NamedTensor]) -> Result<Self> {
        let mut opt = Self::new(params, weight_decay);
        import(&mut opt.m, "opt.m.", tensors)?;
        import(&mut opt.v, "opt.v.", tensors)?;
        opt.t = t;
        if opt.m.max_abs().is_nan() || opt.v.max_abs().is_nan() {
            return Err(Error::Checkpoint("optimizer moments contain NaN".into()));
        }
        Ok(opt)
    }
}

/// Learning rate for 1-based `step`: linear warmup to `peak` over
/// `warmup` steps, then cosine decay to 0 at `total`.
pub fn lr_at(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step <= warmup {
        return peak * step as f64 / warmup.max(1) as f64;
    }
    if total <= warmup {
        return peak;
    }
    let frac = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * frac).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, HeadsConfig};

    fn tiny() -> OnlineNet {
        let enc = EncoderConfig {
            depth: 1,
            dim: 4,
            heads: 1,
            mlp_ratio: 1.0,
            patch_size: 2,
            image_size: 4,
            channels: 1,
            drop_path: 0.0,
        };
        let heads = HeadsConfig {
            proj_layers: 1,
            proj_hidden: 4,
            proj_out: 4,
            pred_layers: 1,
            pred_hidden: 4,
            pred_out: 4,
        };
        OnlineNet::init(&enc, &heads, 1)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // After one step the bias-corrected ratio m̂/√v̂ is g/|g| (up to eps).
        let mut net = tiny();
        let before = net.clone();
        let mut grads = net.zeros_like();
        grads.fill(0.5);
        let mut opt = AdamW::new(&net, 0.0);
        opt.step(&mut net, &grads, 0.01);
        for (a, b) in net.params().iter().zip(before.params()) {
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((y - x - 0.01 * 0.5 / (0.5 + EPS)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn decoupled_decay_hits_matrices_only() {
        let mut net = tiny();
        let before = net.clone();
        let grads = net.zeros_like();
        let mut opt = AdamW::new(&net, 0.1);
        opt.step(&mut net, &grads, 0.5);
        for (a, b) in net.params().iter().zip(before.params()) {
            let factor = if decays(&a.name) { 1.0 - 0.05 } else { 1.0 };
            for (x, y) in a.data.iter().zip(b.data) {
                assert!((x - y * factor).abs() < 1e-15, "{}", a.name);
            }
        }
        assert!(!decays("backbone.pos_embed"));
        assert!(!decays("backbone.mask_token"));
        assert!(decays("recon.w"));
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut net = tiny();
        let before = net.clone();
        let mut grads = net.zeros_like();
        grads.fill(3.0);
        let mut opt = AdamW::new(&net, 0.05);
        opt.step(&mut net, &grads, 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 10, 100, 1.0), 0.0);
        assert_eq!(lr_at(5, 10, 100, 1.0), 0.5);
        assert_eq!(lr_at(10, 10, 100, 1.0), 1.0);
        assert!((lr_at(55, 10, 100, 1.0) - 0.5).abs() < 1e-12);
        assert!(lr_at(100, 10, 100, 1.0).abs() < 1e-15);
        assert_eq!(lr_at(3, 0, 0, 2.0), 2.0);
    }
}
