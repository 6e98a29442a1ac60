//! AdamW with decoupled weight decay, the warmup-cosine schedule and
//! global-norm gradient clipping.

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

/// Linear warmup from 0 to `base`, then cosine decay to `floor·base`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_epochs: f64,
    pub total_epochs: f64,
    pub floor: f64,
}

impl LrSchedule {
    /// Learning rate at fractional epoch `e`.
    pub fn at(&self, e: f64) -> f64 {
        if e < self.warmup_epochs {
            return self.base * e / self.warmup_epochs;
        }
        let span = (self.total_epochs - self.warmup_epochs).max(f64::MIN_POSITIVE);
        let q = ((e - self.warmup_epochs) / span).clamp(0.0, 1.0);
        let lo = self.floor * self.base;
        lo + (self.base - lo) * 0.5 * (1.0 + (std::f64::consts::PI * q).cos())
    }
}

/// Scales `grads` in place so their joint ℓ₂ norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [&mut Vec<Tensor<F>>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = F::c(max_norm / norm);
        for t in grads.iter_mut().flat_map(|g| g.iter_mut()) {
            for v in t.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

/// Joint ℓ₂ norm of several gradient lists.
pub fn global_norm<F: Real>(grads: &[&Vec<Tensor<F>>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .flat_map(|t| t.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Adam moments with weight decay applied directly to the parameters
/// that carry the decay flag.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new<F: Real>(store: &ParamStore<F>, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>, grads: &[Tensor<F>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::Argument(format!(
                "{} gradients for {} parameters (optimizer built for {})",
                grads.len(),
                store.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in store.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decay { lr * self.weight_decay } else { 0.0 };
            for (((x, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.as_f64();
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                let xv = x.as_f64();
                *x = F::c(xv - decay * xv - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
        Ok(())
    }
}
