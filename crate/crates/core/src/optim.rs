//! Adam with decoupled weight decay, a warmup/linear-decay schedule and
//! global-norm gradient clipping.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Linear warmup to `peak`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn new(peak: f64, warmup_fraction: f64, total_steps: u64) -> Self {
        let warmup_steps = (warmup_fraction * total_steps as f64).round() as u64;
        Self {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate for the zero-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let decay_span = self.total_steps.saturating_sub(self.warmup_steps);
        if decay_span == 0 {
            return self.peak;
        }
        let remaining = self.total_steps.saturating_sub(step) as f64;
        self.peak * (remaining / decay_span as f64).max(0.0)
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Float>(grads: &mut [&mut ParamSet<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .map(|g| {
            let n = g.global_norm();
            n * n
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let factor = T::of(max_norm / (norm + 1e-6));
        for g in grads.iter_mut() {
            g.scale(factor);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    first: ParamSet<T>,
    second: ParamSet<T>,
    steps: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(config: AdamWConfig, params: &ParamSet<T>) -> Self {
        Self {
            config,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        }
    }

    pub fn from_state(config: AdamWConfig, first: ParamSet<T>, second: ParamSet<T>, steps: u64) -> Result<Self> {
        first.ensure_congruent(&second)?;
        Ok(Self {
            config,
            first,
            second,
            steps,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> (&ParamSet<T>, &ParamSet<T>) {
        (&self.first, &self.second)
    }

    /// One update at learning rate `lr`. Weight decay skips vectors (biases and
    /// norm gains).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &ParamSet<T>, lr: f64) -> Result<()> {
        params.ensure_congruent(grads)?;
        params.ensure_congruent(&self.first)?;
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        let eps = T::of(c.eps);
        for i in 0..params.len() {
            let decay = if params.values()[i].ndim() > 1 {
                T::of(lr * c.weight_decay)
            } else {
                T::zero()
            };
            let p = &mut params.values_mut()[i];
            Zip::from(p)
                .and(&grads.values()[i])
                .and(&mut self.first.values_mut()[i])
                .and(&mut self.second.values_mut()[i])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + one_b1 * g;
                    *v = b2 * *v + one_b2 * g * g;
                    let denom = v.sqrt() / bc2_sqrt + eps;
                    *p = *p - decay * *p - step_size * *m / denom;
                });
        }
        Ok(())
    }
}
