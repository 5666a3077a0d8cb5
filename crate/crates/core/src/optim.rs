//! AdamW with decoupled weight decay, global-norm clipping and the
//! warmup / linear-decay learning-rate schedule.

use alloc::collections::BTreeMap;
use alloc::format;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub peak_lr: f64,
}

impl Schedule {
    /// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.peak_lr;
            }
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return 0.0;
        }
        let left = self.total_steps.saturating_sub(step) as f64;
        (self.peak_lr * left / (self.total_steps - self.warmup_steps) as f64).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
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
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    /// State exists only for parameters that have been updated, which are
    /// never frozen.
    pub state: BTreeMap<ParamId, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// One update from the gradients stored on the parameters, which are
    /// then cleared. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - Float::powi(b1, t);
        let bc2 = 1.0 - Float::powi(b2, t);
        let ids: alloc::vec::Vec<ParamId> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let Some(grad) = p.grad.take() else { continue };
            if p.frozen {
                return Err(Error::Contract(format!("frozen parameter {} has a gradient", p.name)));
            }
            let st = self.state.entry(id).or_insert_with(|| Moments {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
            });
            let decay = T::from_f64(1.0 - lr * self.cfg.weight_decay);
            let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
            let (one_b1, one_b2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
            let (c1, c2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
            let (lr_t, eps) = (T::from_f64(lr), T::from_f64(self.cfg.eps));
            let w = p.tensor.data_mut();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for i in 0..w.len() {
                let g = grad.data()[i];
                m[i] = b1t * m[i] + one_b1 * g;
                v[i] = b2t * v[i] + one_b2 * g * g;
                let mh = m[i] * c1;
                let vh = v[i] * c2;
                w[i] = w[i] * decay - lr_t * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm of all stored gradients.
pub fn grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|&x| {
            let x = x.to_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let norm = grad_norm(store);
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if norm > max_norm {
        let k = T::from_f64(max_norm / norm);
        let ids: alloc::vec::Vec<ParamId> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                for x in g.data_mut() {
                    *x *= k;
                }
            }
        }
    }
    Ok(norm)
}
