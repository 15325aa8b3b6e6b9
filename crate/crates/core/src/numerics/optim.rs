use alloc::format;
use alloc::vec::Vec;

use super::{Param, Real};
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerVariant {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub variant: OptimizerVariant,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam() -> Self {
        Self { variant: OptimizerVariant::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn adamw() -> Self {
        Self { variant: OptimizerVariant::AdamW, weight_decay: 0.01, ..Self::adam() }
    }
}

/// First/second moment state for a fixed, ordered list of parameters.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<T>], &[Vec<T>]) {
        (&self.m, &self.v)
    }

    /// One bias-corrected update of every parameter from its accumulated
    /// gradient. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            bail!(Usage, "optimizer tracks {} parameters, got {}", self.m.len(), params.len());
        }
        for (i, p) in params.iter().enumerate() {
            if p.value.len() != self.m[i].len() || p.grad.len() != p.value.len() {
                bail!(Dimension, "parameter {} changed shape to {:?}", i, p.value.shape());
            }
            if let Some(j) = p.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(crate::Error::Numerical(format!("non-finite gradient in parameter {i} at element {j}")));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - libm::pow(c.beta1, self.step as f64));
        let bc2 = T::of(1.0 - libm::pow(c.beta2, self.step as f64));
        let lr_t = T::of(lr);
        let eps = T::of(c.eps);
        let decay = match c.variant {
            OptimizerVariant::AdamW => T::of(lr * c.weight_decay),
            OptimizerVariant::Adam => T::zero(),
        };
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let Param { value, grad } = &mut **p;
            for (((w, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                if c.variant == OptimizerVariant::AdamW {
                    *w = *w - decay * *w;
                }
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w = *w - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to 0.
pub fn cosine_warmup_lr(step: usize, warmup_steps: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if warmup_steps >= total_steps || step > total_steps {
        bail!(Usage, "need step ≤ total and warmup < total (step {step}, warmup {warmup_steps}, total {total_steps})");
    }
    if base_lr < 0.0 {
        bail!(Usage, "negative base learning rate {base_lr}");
    }
    if step < warmup_steps {
        return Ok(base_lr * step as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress))).max(0.0))
}
