//! AdamW with bias correction and decoupled weight decay, plus the
//! linear-warmup / cosine-decay learning rate schedule.

use std::collections::HashMap;

use crate::params::{Bindings, ParamId, ParamSet};
use crate::tensor::Gradients;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct AdamW {
    cfg: AdamConfig,
    state: HashMap<ParamId, Moments>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamW { cfg, state: HashMap::new(), t: 0 }
    }

    /// One update: `p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    /// Non-trainable parameters are untouched; a parameter the loss never
    /// reached gets a zero gradient (moments decay, weight decay applies).
    pub fn step(&mut self, set: &mut ParamSet, binds: &Bindings, grads: &Gradients, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, var) in binds.iter() {
            if !set.is_trainable(id) {
                continue;
            }
            let param = set.get_mut(id);
            let n = param.numel();
            let state = self
                .state
                .entry(id)
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let grad = grads.wrt_ref(var).map(|t| t.data());
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.map_or(0.0, |d| d[i]);
                state.m[i] = c.beta1 * state.m[i] + (1.0 - c.beta1) * g;
                state.v[i] = c.beta2 * state.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = state.m[i] / bc1;
                let v_hat = state.v[i] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *p);
            }
        }
    }
}

/// Linear warmup to the peak then cosine decay to zero at `total`.
pub fn lr_schedule(step: u64, peak_lr: f64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && step < warmup {
        return peak_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = (step - warmup) as f64 / span;
    peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn step_once(
        opt: &mut AdamW,
        set: &mut ParamSet,
        id: ParamId,
        lr: f64,
        attach: bool,
    ) -> f64 {
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let var = binds.bind(&mut g, set, id);
        let loss = if attach {
            g.sum_all(var).unwrap()
        } else {
            let other = g.leaf(&Tensor::scalar(1.0));
            g.sum_all(other).unwrap()
        };
        let grads = g.backward(loss).unwrap();
        opt.step(set, &binds, &grads, lr);
        set.get(id).item()
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let mut set = ParamSet::new();
        let id = set.insert("p", Tensor::scalar(1.25));
        let mut opt = AdamW::new(AdamConfig::default());
        let p = step_once(&mut opt, &mut set, id, 0.1, false);
        assert_eq!(p, 1.25);
    }

    #[test]
    fn constant_unit_gradient_step_approaches_lr() {
        // closed-form Adam recursion: with g=1 every step, m_hat = v_hat = 1,
        // so the per-step delta tends to lr exactly
        let mut set = ParamSet::new();
        let id = set.insert("p", Tensor::scalar(0.0));
        let mut opt = AdamW::new(AdamConfig { weight_decay: 0.0, ..Default::default() });
        let lr = 0.01;
        let mut prev = 0.0;
        let mut delta = 0.0;
        for _ in 0..200 {
            let p = step_once(&mut opt, &mut set, id, lr, true);
            delta = prev - p;
            prev = p;
        }
        assert!((delta - lr).abs() < 1e-6, "delta {delta} vs lr {lr}");
    }

    #[test]
    fn decoupled_weight_decay_shrinks_by_lr_wd() {
        let mut set = ParamSet::new();
        let id = set.insert("p", Tensor::scalar(2.0));
        let mut opt = AdamW::new(AdamConfig { weight_decay: 0.1, ..Default::default() });
        let lr = 0.5;
        let p = step_once(&mut opt, &mut set, id, lr, false);
        assert!((p - 2.0 * (1.0 - lr * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn non_trainable_params_are_skipped() {
        let mut set = ParamSet::new();
        let id = set.insert_state("stat", Tensor::scalar(3.0));
        let mut opt = AdamW::new(AdamConfig { weight_decay: 0.5, ..Default::default() });
        let p = step_once(&mut opt, &mut set, id, 0.5, true);
        assert_eq!(p, 3.0);
    }

    #[test]
    fn schedule_endpoints() {
        let (peak, warmup, total) = (1e-3, 100, 1000);
        assert_eq!(lr_schedule(0, peak, warmup, total), 0.0);
        assert_eq!(lr_schedule(warmup, peak, warmup, total), peak);
        assert!(lr_schedule(total, peak, warmup, total).abs() < 1e-18);
        // cosine midpoint is half the peak
        let mid = lr_schedule(warmup + (total - warmup) / 2, peak, warmup, total);
        assert!((mid - peak / 2.0).abs() < 1e-12);
        // no warmup starts at the peak
        assert_eq!(lr_schedule(0, peak, 0, total), peak);
    }
}
