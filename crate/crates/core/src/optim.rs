//! Adaptive-moment optimizer with decoupled weight decay, and global-norm clipping.

use crate::error::{contract, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
}

impl AdamWConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip: Some(100.0) }
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Per-parameter moment estimates for one [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

/// What one [`AdamW::step`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || params.values().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Frozen sets are refused; arrays marked non-trainable are skipped.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: Vec<Tensor>) -> Result<StepStats> {
        if params.is_frozen() {
            return Err(contract("optimizer step on a frozen parameter set"));
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(contract("gradient list does not match parameter set"));
        }
        let grad_norm = match self.config.clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        let clipped_norm = global_norm(&grads);
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in params.ids() {
            if !params.requires_grad(id) {
                continue;
            }
            let i = id.index();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= c.lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * p[k]);
            }
        }
        Ok(StepStats { grad_norm, clipped_norm })
    }

    /// Moment buffers and step count, for checkpointing.
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(contract("optimizer state size mismatch"));
        }
        for (a, b) in self.m.iter().zip(&m).chain(self.v.iter().zip(&v)) {
            if a.shape() != b.shape() {
                return Err(contract("optimizer state shape mismatch"));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
