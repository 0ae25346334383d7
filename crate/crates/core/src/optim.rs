//! SGD with momentum, Adam and the cosine schedule.

use brau_tensor::{lit, Element, Tensor};

use crate::config::{OptimConfig, OptimKind, Schedule};
use crate::error::{BrauError, Result};
use crate::params::{ParamKind, ParamStore};

/// `lr0·(1+cos(π·step/total))/2`.
pub fn cosine_lr(step: u64, total: u64, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = step.min(total) as f64 / total as f64;
    lr0 * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

pub fn scheduled_lr(cfg: &OptimConfig, step: u64, total: u64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.lr,
        Schedule::Cosine => cosine_lr(step, total, cfg.lr),
    }
}

/// `v ← μv + g + wd·p; p ← p − lr·v`.
pub fn sgd_update<T: Element>(p: &mut [T], g: &[T], v: &mut [T], lr: f64, momentum: f64, wd: f64) {
    let (lr, mu, wd) = (lit::<T>(lr), lit::<T>(momentum), lit::<T>(wd));
    for ((p, &g), v) in p.iter_mut().zip(g).zip(v.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// Adam with bias correction at step `t` (1-based); weight decay is added to
/// the gradient.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Element>(
    p: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    wd: f64,
) {
    let (b1, b2) = (lit::<T>(betas.0), lit::<T>(betas.1));
    let c1 = lit::<T>(1.0 - betas.0.powi(t as i32));
    let c2 = lit::<T>(1.0 - betas.1.powi(t as i32));
    let (lr, eps, wd) = (lit::<T>(lr), lit::<T>(eps), lit::<T>(wd));
    let one = T::one();
    for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let g = g + wd * *p;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p = *p - lr * mh / (vh.sqrt() + eps);
    }
}

/// Optimizer buffers, one slot per parameter id.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Element> {
    pub cfg: OptimConfig,
    /// Number of updates applied so far.
    pub t: u64,
    /// Momentum for SGD, first moment for Adam.
    pub m: Vec<Option<Tensor<T>>>,
    /// Second moment, Adam only.
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(cfg: &OptimConfig, n_params: usize) -> Self {
        Self {
            cfg: cfg.clone(),
            t: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    fn decays(&self, kind: ParamKind) -> bool {
        kind == ParamKind::Weight || self.cfg.decay_all
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient and buffers are left alone.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<Tensor<T>>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != store.len() {
            return Err(BrauError::Invalid(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        self.t += 1;
        for id in store.ids() {
            let kind = store.kind(id);
            let Some(g) = &grads[id] else { continue };
            if !kind.trainable() {
                continue;
            }
            if g.shape() != store.value(id).shape() {
                return Err(BrauError::Invalid(format!(
                    "gradient {:?} for {} of shape {:?}",
                    g.shape(),
                    store.name(id),
                    store.value(id).shape()
                )));
            }
            let wd = if self.decays(kind) {
                self.cfg.weight_decay
            } else {
                0.0
            };
            let shape = g.shape().to_vec();
            let m = self.m[id].get_or_insert_with(|| Tensor::zeros(&shape));
            let p = store.value_mut(id).data_mut();
            match self.cfg.kind {
                OptimKind::Sgd => sgd_update(p, g.data(), m.data_mut(), lr, self.cfg.momentum, wd),
                OptimKind::Adam => {
                    let v = self.v[id].get_or_insert_with(|| Tensor::zeros(&shape));
                    adam_update(
                        p,
                        g.data(),
                        m.data_mut(),
                        v.data_mut(),
                        self.t,
                        lr,
                        (self.cfg.beta1, self.cfg.beta2),
                        self.cfg.adam_eps,
                        wd,
                    )
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.4), 0.4);
        assert!(cosine_lr(10, 10, 0.4).abs() < 1e-15);
        assert!((cosine_lr(5, 10, 0.4) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = [1.0f64, 2.0];
        let mut v = [0.0; 2];
        sgd_update(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, [0.95, 2.1]);
    }
}
