//! Adam over one parameter partition, global-norm clipping, and the step
//! decay schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for a partition made of several [`ParamSet`]s.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<ParamSet>,
    pub v: Vec<ParamSet>,
}

impl Adam {
    pub fn new(config: AdamConfig, partition: &[&ParamSet]) -> Self {
        Self {
            config,
            t: 0,
            m: partition.iter().map(|p| p.zeros_like()).collect(),
            v: partition.iter().map(|p| p.zeros_like()).collect(),
        }
    }

    /// One bias-corrected update at learning rate `lr`.
    pub fn step(&mut self, lr: f64, params: &mut [&mut ParamSet], grads: &[&ParamSet]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameter sets, got {} / {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (set, ((p, g), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            if !p.same_layout(g) || !p.same_layout(m) {
                return Err(Error::Shape(format!("parameter set {set} changed layout")));
            }
            for ((pp, gp), (mp, vp)) in p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
                for (((w, &gr), mi), vi) in pp.data.iter_mut().zip(&gp.data).zip(&mut mp.data).zip(&mut vp.data) {
                    *mi = beta1 * *mi + (1.0 - beta1) * gr;
                    *vi = beta2 * *vi + (1.0 - beta2) * gr * gr;
                    *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping and whether clipping happened.
pub fn clip_global_norm(grads: &mut [&mut ParamSet], max_norm: f64) -> (f64, bool) {
    let norm = grads.iter().map(|g| g.norm_sq()).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.scale(s));
        (norm, true)
    } else {
        (norm, false)
    }
}

/// Learning rate for 1-based `step`: halved after 40% and again after 80%
/// of `total_steps` when `decay` is on.
pub fn decayed_lr(base: f64, step: u64, total_steps: u64, decay: bool) -> f64 {
    if !decay {
        return base;
    }
    let halvings = [0.4, 0.8]
        .iter()
        .filter(|&&f| step as f64 > f * total_steps as f64)
        .count();
    base * 0.5f64.powi(halvings as i32)
}
