use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are kept per parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) {
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (name, param) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let p = param.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (one - b1) * gi;
                vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Flattened state for checkpointing: step count plus both moment maps.
    pub fn state(&self) -> (u64, &BTreeMap<String, Tensor<T>>, &BTreeMap<String, Tensor<T>>) {
        (self.step, &self.first, &self.second)
    }

    pub fn restore(
        config: AdamConfig,
        step: u64,
        first: BTreeMap<String, Tensor<T>>,
        second: BTreeMap<String, Tensor<T>>,
    ) -> Self {
        Self {
            config,
            step,
            first,
            second,
        }
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<T: Real>(grads: &BTreeMap<String, Tensor<T>>) -> f64 {
    grads
        .values()
        .map(|g| g.sum_sq().to_f64().unwrap())
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut BTreeMap<String, Tensor<T>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / (norm + 1e-12));
        for g in grads.values_mut() {
            g.scale_inplace(s);
        }
    }
    norm
}

/// Exponential moving average of parameters.
#[derive(Clone, Debug)]
/// Exponential moving average of parameters; the decay ramps up as `(1+n)/(10+n)` early on.
pub struct Ema<T> {
    pub decay: f64,
    pub shadow: ParamStore<T>,
    pub updates: u64,
}

impl<T: Real> Ema<T> {
    pub fn new(decay: f64, params: &ParamStore<T>) -> Self {
        Self {
            decay,
            shadow: params.clone(),
            updates: 0,
        }
    }

    pub fn update(&mut self, params: &ParamStore<T>) {
        self.updates += 1;
        let n = self.updates as f64;
        let d = T::lit(self.decay.min(n / (9.0 + n)));
        let one = T::one();
        for (name, s) in self.shadow.iter_mut() {
            if let Some(p) = params.get(name) {
                for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
                    *a = d * *a + (one - d) * b;
                }
            }
        }
    }
}
