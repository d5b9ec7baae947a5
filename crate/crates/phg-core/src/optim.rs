//! AdamW with decoupled weight decay and a triangular cyclic learning rate.

use crate::error::{PhgError, Result};

/// Hyper-parameters for the optimizer. The learning rate oscillates between
/// `lr_min` and `lr_max` with a triangular wave of `lr_period` steps
/// (lr_min at the cycle boundaries, lr_max at mid-cycle).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr_min: f32,
    pub lr_max: f32,
    pub lr_period: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr_min: 1e-4,
            lr_max: 1e-3,
            lr_period: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min) {
            return Err(PhgError::Config(format!(
                "cyclic lr bounds must satisfy 0 < lr_min <= lr_max, got [{}, {}]",
                self.lr_min, self.lr_max
            )));
        }
        if self.lr_period == 0 {
            return Err(PhgError::Config("lr_period must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(PhgError::Config(format!(
                "betas must lie in [0,1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(PhgError::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Optimizer state over one flat parameter vector: first/second moments plus
/// the global step counter driving the cyclic schedule.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m: Vec<f32>,
    v: Vec<f32>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, param_count: usize) -> Result<Self> {
        config.validate()?;
        Ok(OptimizerState { config, m: vec![0.0; param_count], v: vec![0.0; param_count], step: 0 })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate for a given step index (0-based): triangular wave in
    /// `[lr_min, lr_max]`.
    pub fn lr_at(config: &AdamWConfig, step: u64) -> f32 {
        let phase = (step % config.lr_period) as f32 / config.lr_period as f32;
        let tri = 1.0 - (2.0 * phase - 1.0).abs();
        config.lr_min + (config.lr_max - config.lr_min) * tri
    }

    /// One AdamW update. `params` and `grads` must match the state length.
    /// NaN/Inf gradients abort before touching any state.
    pub fn adamw_step(&mut self, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(PhgError::Shape(format!(
                "optimizer sized for {} params, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(bad) = grads.iter().find(|g| !g.is_finite()) {
            return Err(PhgError::Numeric(format!("non-finite gradient {bad} in adamw_step")));
        }
        let c = &self.config;
        let lr = Self::lr_at(c, self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for i in 0..params.len() {
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * grads[i];
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            // Decoupled weight decay: the decay term bypasses the moments.
            params[i] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * params[i]);
        }
        self.step += 1;
        Ok(())
    }
}
