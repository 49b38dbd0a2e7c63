use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::Parameters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers, one per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &Parameters) -> Self {
        let zeros = || params.blocks().iter().map(|b| vec![0.0; b.tensor.numel()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with decoupled weight decay: `θ ← θ − lr·wd·θ`, then the
    /// bias-corrected adaptive step. `grads[i]` belongs to block `i`.
    pub fn step(&mut self, params: &mut Parameters, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(TrainError::Contract(format!(
                "{} gradient blocks for {} parameter blocks",
                grads.len(),
                params.len()
            )));
        }
        for (block, g) in params.blocks().iter().zip(grads) {
            if g.len() != block.tensor.numel() {
                return Err(TrainError::Contract(format!("gradient shape mismatch for {}", block.name)));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TrainError::Divergence {
                    block: block.name.clone(),
                });
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - lr * c.weight_decay;
        for (bi, block) in params.blocks_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[bi], &mut self.v[bi], &grads[bi]);
            for (k, theta) in block.tensor.data.iter_mut().enumerate() {
                let gk = g[k] as f64;
                let mk = c.beta1 * m[k] as f64 + (1.0 - c.beta1) * gk;
                let vk = c.beta2 * v[k] as f64 + (1.0 - c.beta2) * gk * gk;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / bc1) / ((vk / bc2).sqrt() + c.eps);
                *theta = (*theta as f64 * decay - update) as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr0: 5e-5,
            decay: 0.93,
            floor: 1e-6,
        }
    }
}

impl LrSchedule {
    /// `max(lr0 · decay^epoch, floor)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        (self.lr0 * self.decay.powi(epoch as i32)).max(self.floor)
    }
}
