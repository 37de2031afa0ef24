//! AdamW with decoupled weight decay, linear-warmup cosine schedule and
//! global gradient-norm clipping.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = |p: &crate::numerics::Parameter<F>| vec![F::zero(); p.tensor.len()];
        AdamW {
            config,
            step: 0,
            m: store.iter().map(|(_, p)| zeros(p)).collect(),
            v: store.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// One update with learning rate `lr`. Frozen parameters and parameters
    /// without a gradient are left untouched (bitwise).
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Vec<F>)], lr: f64) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let step_size = F::of(lr / bc1);
        let decay = F::of(1.0 - lr * c.weight_decay);
        let eps = F::of(c.eps);
        let inv_bc2 = F::of(1.0 / bc2);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if p.frozen || lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gk = g[k];
                m[k] = b1 * m[k] + (F::one() - b1) * gk;
                v[k] = b2 * v[k] + (F::one() - b2) * gk * gk;
                let denom = (v[k] * inv_bc2).sqrt() + eps;
                *w = *w * decay - step_size * m[k] / denom;
            }
        }
    }

    /// Moment buffers, for checkpointing: `(m, v)` per parameter id.
    pub fn moments(&self) -> impl Iterator<Item = (&[F], &[F])> {
        self.m.iter().zip(&self.v).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn set_moments(&mut self, id: ParamId, m: Tensor<F>, v: Tensor<F>) {
        self.m[id.0] = m.into_data();
        self.v[id.0] = v.into_data();
    }
}

/// Scales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut [(ParamId, Vec<F>)], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|(_, g)| g.iter())
        .map(|&x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && total > max_norm {
        let s = F::of(max_norm / (total + 1e-6));
        for (_, g) in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    total
}

/// Learning rate at `step` (0-based): linear warmup to `base` over
/// `warmup` steps, then cosine decay to zero at `total`.
pub fn warmup_cosine(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
