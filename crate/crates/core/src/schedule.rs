//! Variance schedule and the forward (noising) process.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Per-step quantities of a diffusion schedule. Steps are 1-based; the
/// arrays store step `t` at index `t - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Linear endpoints used when none are configured: the usual 1e-4..2e-2
/// over 1000 steps, stretched by `1000 / steps` for shorter chains so the
/// chain still ends near pure noise.
pub fn default_beta_range(steps: usize) -> (f64, f64) {
    let scale = 1000.0 / steps.max(1) as f64;
    ((1e-4 * scale).min(0.5), (2e-2 * scale).min(0.999))
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
            )));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (steps - 1) as f64;
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                .collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for a in &alpha {
            prod *= a;
            alpha_bar.push(prod);
        }
        let sigma = (0..steps)
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                (beta[i] * (1.0 - prev) / (1.0 - alpha_bar[i])).sqrt()
            })
            .collect();
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    pub fn linear_default(steps: usize) -> Result<Self> {
        let (s, e) = default_beta_range(steps);
        Self::linear(steps, s, e)
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::StepOutOfRange {
                t,
                max: self.steps(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// Cumulative product of `alpha` up to `t`, with the value 1 at `t = 0`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// One step of the noising chain: `sqrt(1 - beta_t) x + sqrt(beta_t) xi`.
pub fn forward_chain_step<R: Rng + ?Sized>(
    x_prev: &Tensor,
    t: usize,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let keep = (1.0 - sched.beta(t)).sqrt();
    let noise = sched.beta(t).sqrt();
    let mut out = x_prev.clone();
    for v in out.data_mut() {
        let xi: f64 = rng.sample(StandardNormal);
        *v = keep * *v + noise * xi;
    }
    Ok(out)
}

/// Closed-form draw from `q(x_t | x_0)` with the given noise.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.check_step(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::shape("q_sample", x0.shape(), eps.shape()));
    }
    let (a, b) = q_coefficients(t, sched);
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(x, e)| a * x + b * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))`.
pub(crate) fn q_coefficients(t: usize, sched: &NoiseSchedule) -> (f64, f64) {
    let ab = sched.alpha_bar(t);
    (ab.sqrt(), (1.0 - ab).sqrt())
}

/// Standard deviation of the reverse step at `t`; zero at `t = 1`.
pub fn posterior_sigma(t: usize, sched: &NoiseSchedule) -> Result<f64> {
    sched.check_step(t)?;
    Ok(sched.sigma(t))
}
