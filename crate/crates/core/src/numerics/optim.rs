use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Real, Tensor};

/// AdamW with cosine learning-rate decay and optional linear warm-up.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_iters: usize,
    /// Iterations over which the cosine schedule decays to `min_lr_ratio * lr`.
    pub total_iters: usize,
    pub min_lr_ratio: f64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_iters: 0,
            total_iters: 1,
            min_lr_ratio: 0.0,
            grad_clip: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter < self.warmup_iters {
            return self.lr * (iter + 1) as f64 / self.warmup_iters as f64;
        }
        let span = self.total_iters.saturating_sub(self.warmup_iters).max(1);
        let progress = ((iter - self.warmup_iters) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cos)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: usize,
    m: HashMap<String, Tensor<T>>,
    v: HashMap<String, Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update from the store's accumulated gradients. Returns the
    /// pre-clip global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> f64 {
        let lr = self.config.lr_at(self.step);
        self.step += 1;
        let mut sq = 0.0f64;
        store.for_each_trainable(|_, _, g| {
            sq += g
                .data()
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>();
        });
        let norm = sq.sqrt();
        let clip = if self.config.grad_clip > 0.0 && norm > self.config.grad_clip {
            self.config.grad_clip / norm
        } else {
            1.0
        };
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (eps, wd) = (self.config.eps, self.config.weight_decay);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        store.for_each_trainable(|name, value, grad| {
            let m = m_all
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let v = v_all
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            let decay = if value.rank() >= 2 { wd } else { 0.0 };
            for i in 0..value.numel() {
                let g = grad.data()[i].as_f64() * clip;
                let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * g * g;
                m.data_mut()[i] = T::of(mi);
                v.data_mut()[i] = T::of(vi);
                let mut p = value.data()[i].as_f64();
                p -= lr * decay * p;
                p -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                value.data_mut()[i] = T::of(p);
            }
        });
        norm
    }
}
