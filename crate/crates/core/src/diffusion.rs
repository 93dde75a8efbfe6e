//! Variance schedule, closed-form forward noising and the ancestral reverse step.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use storyldm_autodiff::{Real, Tensor};

use crate::error::{Error, Result};

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.05;

/// Linear β schedule. Index `t` runs over `1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 && !(steps == 1 && beta_start == beta_end) {
        return Err(Error::Config(format!("need at least 2 diffusion steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        beta_start,
        beta_end,
        betas,
        alphas,
        alpha_bars,
    })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

impl NoiseSchedule {
    /// A single-step schedule, useful for exercising the reverse update in isolation.
    pub fn single(beta: f64) -> Result<Self> {
        make_schedule(1, beta, beta)
    }

    fn check(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::OutOfRange {
                what: "timestep",
                value: t as i64,
                range: format!("1..={}", self.steps),
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check(t)?])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// Posterior variance `β_t (1 - ᾱ_{t-1}) / (1 - ᾱ_t)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let i = self.check(t)?;
        let ab = self.alpha_bars[i];
        let ab_prev = if i == 0 { 1.0 } else { self.alpha_bars[i - 1] };
        Ok(self.betas[i] * (1.0 - ab_prev) / (1.0 - ab))
    }

    pub fn snr(&self, t: usize) -> Result<f64> {
        let ab = self.alpha_bar(t)?;
        Ok(ab / (1.0 - ab))
    }
}

/// `√ᾱ_t z0 + √(1-ᾱ_t) ε`
pub fn q_sample<T: Real>(z0: &Tensor<T>, t: usize, eps: &Tensor<T>, schedule: &NoiseSchedule) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() {
        return Err(Error::Shape {
            op: "q_sample",
            expected: z0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    schedule.check(t)?;
    let ab = schedule.alpha_bar(t)?;
    let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(z0.zip_map(eps, |z, e| a * z + s * e))
}

/// Forward noising of a batch `[B, ...]` with one timestep per item.
pub fn q_sample_batch<T: Real>(
    z0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if z0.shape() != eps.shape() || z0.rank() == 0 || z0.dim(0) != ts.len() {
        return Err(Error::Shape {
            op: "q_sample_batch",
            expected: z0.shape().to_vec(),
            got: eps.shape().to_vec(),
        });
    }
    let per = z0.numel() / ts.len().max(1);
    let mut out = z0.clone();
    for (i, &t) in ts.iter().enumerate() {
        schedule.check(t)?;
        let ab = schedule.alpha_bar(t)?;
        let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
        let range = i * per..(i + 1) * per;
        for (o, &e) in out.data_mut()[range.clone()].iter_mut().zip(&eps.data()[range]) {
            *o = a * *o + s * e;
        }
    }
    Ok(out)
}

/// Posterior mean `(z_t - β_t/√(1-ᾱ_t) ε̂) / √α_t`.
pub fn posterior_mean<T: Real>(
    z_t: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if z_t.shape() != eps_pred.shape() {
        return Err(Error::Shape {
            op: "p_sample_step",
            expected: z_t.shape().to_vec(),
            got: eps_pred.shape().to_vec(),
        });
    }
    let beta = schedule.beta(t)?;
    let ab = schedule.alpha_bar(t)?;
    let inv_sqrt_alpha = T::lit(1.0 / schedule.alpha(t)?.sqrt());
    let coef = T::lit(beta / (1.0 - ab).sqrt());
    Ok(z_t.zip_map(eps_pred, |z, e| inv_sqrt_alpha * (z - coef * e)))
}

/// One ancestral step `z_t → z_{t-1}`. `noise` overrides the Gaussian draw.
/// At `t = 1` no noise is added.
pub fn p_sample_step_with<T: Real>(
    z_t: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut mean = posterior_mean(z_t, t, eps_pred, schedule)?;
    if t > 1 {
        if noise.shape() != z_t.shape() {
            return Err(Error::Shape {
                op: "p_sample_step noise",
                expected: z_t.shape().to_vec(),
                got: noise.shape().to_vec(),
            });
        }
        let sigma = T::lit(schedule.posterior_variance(t)?.sqrt());
        mean = mean.zip_map(noise, |m, n| m + sigma * n);
    }
    Ok(mean)
}

pub fn p_sample_step<T: Real, R: Rng + ?Sized>(
    z_t: &Tensor<T>,
    t: usize,
    eps_pred: &Tensor<T>,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<T>> {
    schedule.check(t)?;
    if t == 1 {
        return posterior_mean(z_t, t, eps_pred, schedule);
    }
    let noise = Tensor::from_fn(z_t.shape(), |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
    p_sample_step_with(z_t, t, eps_pred, schedule, &noise)
}

/// Mean squared error between true and predicted noise.
pub fn training_loss<T: Real>(eps: &Tensor<T>, eps_pred: &Tensor<T>) -> Result<f64> {
    if eps.shape() != eps_pred.shape() {
        return Err(Error::Shape {
            op: "training_loss",
            expected: eps.shape().to_vec(),
            got: eps_pred.shape().to_vec(),
        });
    }
    if eps.numel() == 0 {
        return Err(Error::Empty("training_loss"));
    }
    let sum: f64 = eps
        .data()
        .iter()
        .zip(eps_pred.data())
        .map(|(&a, &b)| {
            let d = (a - b).to_f64().unwrap();
            d * d
        })
        .sum();
    Ok(sum / eps.numel() as f64)
}
