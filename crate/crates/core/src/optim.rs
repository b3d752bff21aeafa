//! Adam/AdamW with linear warmup and global-norm gradient clipping.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::nn::Params;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptKind {
    Adam,
    AdamW,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: IndexMap<String, Tensor>,
    v: IndexMap<String, Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptKind, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over the trainable subset. Grads for names the filter
    /// rejects are ignored, so frozen parameters stay bit-identical.
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &IndexMap<String, Tensor>,
        trainable: impl Fn(&str) -> bool,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(g));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(g));
            for i in 0..g.len() {
                let gi = g.data()[i];
                m.data_mut()[i] = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                v.data_mut()[i] = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data()[i] / bc1;
                let vhat = v.data()[i] / bc2;
                let mut update = mhat / (vhat.sqrt() + self.eps);
                if self.kind == OptKind::AdamW {
                    update += self.weight_decay * p.data()[i];
                }
                p.data_mut()[i] -= lr * update;
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut IndexMap<String, Tensor>, max_norm: f64) -> f64 {
    let total: f64 = grads.values().map(Tensor::squared_norm).sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(s);
        }
    }
    norm
}

/// lr(step) = start + (peak − start) · min(step / warmup_steps, 1).
pub fn linear_warmup_lr(step: u64, start_lr: f64, peak_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return peak_lr;
    }
    let frac = (step as f64 / warmup_steps as f64).min(1.0);
    start_lr + (peak_lr - start_lr) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoints_and_midpoint() {
        // step 0 -> 1e-5, step >= 50 -> 1e-4, step 25 -> 5.5e-5
        assert_eq!(linear_warmup_lr(0, 1e-5, 1e-4, 50), 1e-5);
        assert_eq!(linear_warmup_lr(50, 1e-5, 1e-4, 50), 1e-4);
        assert_eq!(linear_warmup_lr(120, 1e-5, 1e-4, 50), 1e-4);
        let mid = linear_warmup_lr(25, 1e-5, 1e-4, 50);
        assert!((mid - 5.5e-5).abs() < 1e-18);
    }

    #[test]
    fn clip_reduces_norm() {
        let mut grads = IndexMap::new();
        grads.insert("a".to_string(), Tensor::full(&[4], 3.0));
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 6.0).abs() < 1e-12);
        let after: f64 = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frozen_names_untouched() {
        let mut params = Params::new();
        params.insert("train.w", Tensor::full(&[2], 1.0));
        params.insert("frozen.w", Tensor::full(&[2], 1.0));
        let mut grads = IndexMap::new();
        grads.insert("train.w".to_string(), Tensor::full(&[2], 1.0));
        grads.insert("frozen.w".to_string(), Tensor::full(&[2], 1.0));
        let mut opt = Optimizer::new(OptKind::Adam, 0.0);
        opt.step(&mut params, &grads, |n| n.starts_with("train."), 0.1);
        assert_eq!(params.get("frozen.w").data(), &[1.0, 1.0]);
        assert_ne!(params.get("train.w").data(), &[1.0, 1.0]);
    }
}
