use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Adam hyperparameters with a linear-warmup-then-constant learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            warmup_steps: 100,
        }
    }
}

impl AdamConfig {
    /// Learning rate used at 1-based `step`: `lr · min(1, step / warmup)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid Adam settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    lr_scale: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            step: 0,
            lr_scale: 1.0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Multiplier on the scheduled rate, for callers layering a decay on top.
    pub fn set_lr_scale(&mut self, scale: f64) {
        self.lr_scale = scale;
    }

    /// One bias-corrected Adam update from each parameter's gradient slot.
    /// Parameters without a gradient are treated as having zero gradient.
    /// Gradient slots are cleared afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters for state over {}", params.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step) * self.lr_scale;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.len() != m.len() {
                return Err(Error::shape("adam_step", "parameter shape changed"));
            }
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                // Moments still decay so the update stays standard Adam.
                m.iter_mut().for_each(|x| *x *= c.beta1);
                v.iter_mut().for_each(|x| *x *= c.beta2);
                continue;
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("gradient".into()));
            }
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + c.eps);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
