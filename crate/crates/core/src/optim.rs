//! Adam with decoupled weight decay, plus the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter.
/// Parameters without a gradient are treated as having zero gradient.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moments",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for id in store.ids() {
        if let Some(g) = grads.get(id) {
            if g.shape() != store.tensor(id).shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has shape {:?}, parameter {:?}",
                    store.get(id).name,
                    g.shape(),
                    store.tensor(id).shape()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for id in store.ids() {
        let p = store.get_mut(id);
        if !p.trainable {
            continue;
        }
        let i = id.index();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let decay = if p.decay { cfg.weight_decay } else { 0.0 };
        let g = grads.get(id).map(|g| g.data());
        for (k, x) in p.tensor.data_mut().iter_mut().enumerate() {
            let gk = g.map_or(0.0, |g| g[k]);
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            *x -= lr * (mhat / (vhat.sqrt() + cfg.eps) + decay * *x);
        }
    }
    Ok(())
}

/// Linear warmup over the first `warmup_frac` of steps, then cosine decay
/// to zero at the last step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl WarmupCosine {
    pub fn warmup_steps(&self) -> usize {
        ((self.total_steps as f64 * self.warmup_frac).ceil() as usize).max(1)
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let w = self.warmup_steps();
        if step < w {
            return self.base_lr * (step + 1) as f64 / w as f64;
        }
        let span = self.total_steps.saturating_sub(w).max(1);
        let progress = ((step + 1 - w) as f64 / span as f64).min(1.0);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.register("x", Tensor::scalar(x), true).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = one_param(1.5);
        let mut st = AdamState::new(&s);
        let mut g = ParamGrads::zeros_like(&s);
        g.set(s.id("x").unwrap(), Tensor::scalar(0.0));
        adam_step(&mut s, &g, &mut st, 1e-3, &AdamConfig::default()).unwrap();
        assert_eq!(s.by_name("x").unwrap().tensor.item(), 1.5);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = one_param(1.0);
        let mut st = AdamState::new(&s);
        let mut g = ParamGrads::zeros_like(&s);
        g.set(s.id("x").unwrap(), Tensor::scalar(1.0));
        adam_step(&mut s, &g, &mut st, 1e-4, &AdamConfig::default()).unwrap();
        let x = s.by_name("x").unwrap().tensor.item();
        assert!((x - (1.0 - 1e-4 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut s = one_param(1.0);
        let mut st = AdamState::new(&s);
        let mut g = ParamGrads::zeros_like(&s);
        g.set(s.id("x").unwrap(), Tensor::zeros(&[2, 2]));
        assert!(adam_step(&mut s, &g, &mut st, 1e-4, &AdamConfig::default()).is_err());
    }

    #[test]
    fn schedule_rises_then_decays() {
        let sched = WarmupCosine {
            base_lr: 1e-3,
            total_steps: 100,
            warmup_frac: 0.1,
        };
        let lrs: Vec<f64> = (0..100).map(|s| sched.lr_at(s)).collect();
        assert!(lrs[0] <= 1e-4 + 1e-18);
        let peak = lrs.iter().cloned().fold(0.0, f64::max);
        assert_eq!(peak, 1e-3);
        assert_eq!(lrs[9], 1e-3);
        assert!(lrs[..10].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[9..].windows(2).all(|w| w[0] >= w[1]));
        assert!(lrs[99].abs() < 1e-12);
    }
}
