//! Linear beta schedule, forward noising, and reverse-step noise injection.
//!
//! Time steps run 1..=T in the formulas, t = 0 denoting clean data; the
//! precomputed arrays are stored 0-indexed (entry t-1 belongs to step t).

use rand_chacha::ChaCha8Rng;

use crate::tensor::{standard_normal, Real, Tensor};
use crate::{CoreError, Result};

/// How the sampler steps from t to t-1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    /// Next noisy input is the predicted clean motion plus posterior noise.
    #[default]
    Direct,
    /// Classic posterior mean that also pulls toward the current noisy data.
    DdpmPosterior,
}

/// Precomputed noise schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    timesteps: usize,
    beta_min: Real,
    beta_max: Real,
    beta: Vec<Real>,
    alpha_bar: Vec<Real>,
    posterior_var: Vec<Real>,
}

/// Default noise bounds for the linear schedule.
pub const DEFAULT_BETA_MIN: Real = 1e-4;
pub const DEFAULT_BETA_MAX: Real = 0.02;

impl DiffusionSchedule {
    /// Linear schedule: beta_t interpolates from just above `beta_min` at
    /// t = 1 to exactly `beta_max` at t = T.
    pub fn linear(timesteps: usize, beta_min: Real, beta_max: Real) -> Result<Self> {
        if timesteps < 1 {
            return Err(CoreError::Config("timesteps must be at least 1".into()));
        }
        if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
            return Err(CoreError::Config(format!(
                "need 0 < beta_min < beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let t_total = timesteps as Real;
        let mut beta = Vec::with_capacity(timesteps);
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut cumprod = 1.0;
        for t in 1..=timesteps {
            let w = t as Real / t_total;
            let b = beta_min * (1.0 - w) + beta_max * w;
            cumprod *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(cumprod);
        }
        let mut posterior_var = Vec::with_capacity(timesteps);
        for t in 1..=timesteps {
            if t == 1 {
                posterior_var.push(beta[0]);
            } else {
                posterior_var.push((1.0 - alpha_bar[t - 2]) / (1.0 - alpha_bar[t - 1]) * beta[t - 1]);
            }
        }
        Ok(Self { timesteps, beta_min, beta_max, beta, alpha_bar, posterior_var })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn beta_min(&self) -> Real {
        self.beta_min
    }

    pub fn beta_max(&self) -> Real {
        self.beta_max
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.timesteps {
            return Err(CoreError::StepOutOfRange { t, max: self.timesteps });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<Real> {
        self.check_step(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<Real> {
        self.check_step(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn posterior_var(&self, t: usize) -> Result<Real> {
        self.check_step(t)?;
        Ok(self.posterior_var[t - 1])
    }

    /// Forward noising: sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
    pub fn add_noise(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        if x0.shape() != eps.shape() {
            return Err(CoreError::Dimension {
                op: "add_noise",
                detail: format!("x0 shape {:?}, eps shape {:?}", x0.shape(), eps.shape()),
            });
        }
        let ab = self.alpha_bar[t - 1];
        let (ca, ce) = (ab.sqrt(), (1.0 - ab).sqrt());
        let data = x0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| ca * x + ce * e)
            .collect();
        x0.with_data(data)
    }

    /// Reverse-step noise injection: the next noisy input is the predicted
    /// clean motion plus sqrt(posterior variance) noise. At t = 1 the result
    /// is the clean prediction itself.
    pub fn reverse_step(&self, x0_hat: &Tensor, t: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        self.check_step(t)?;
        if t == 1 {
            return Ok(x0_hat.clone());
        }
        let sd = self.posterior_var[t - 1].sqrt();
        if sd == 0.0 {
            return Ok(x0_hat.clone());
        }
        let eps = standard_normal(x0_hat.shape(), rng);
        let data = x0_hat
            .data()
            .iter()
            .zip(eps.data())
            .map(|(x, e)| x + sd * e)
            .collect();
        x0_hat.with_data(data)
    }

    /// Optional comparison mode: the standard posterior mean over
    /// (x0_hat, x_t) plus posterior noise.
    pub fn reverse_step_posterior(
        &self,
        x0_hat: &Tensor,
        x_t: &Tensor,
        t: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        self.check_step(t)?;
        if x0_hat.shape() != x_t.shape() {
            return Err(CoreError::Dimension {
                op: "reverse_step_posterior",
                detail: format!("x0_hat shape {:?}, x_t shape {:?}", x0_hat.shape(), x_t.shape()),
            });
        }
        let b = self.beta[t - 1];
        let ab = self.alpha_bar[t - 1];
        let ab_prev = if t >= 2 { self.alpha_bar[t - 2] } else { 1.0 };
        let c0 = ab_prev.sqrt() * b / (1.0 - ab);
        let ct = (1.0 - b).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let mean: Vec<Real> = x0_hat
            .data()
            .iter()
            .zip(x_t.data())
            .map(|(x0, xt)| c0 * x0 + ct * xt)
            .collect();
        if t == 1 {
            return x0_hat.with_data(mean);
        }
        let sd = self.posterior_var[t - 1].sqrt();
        let eps = standard_normal(x0_hat.shape(), rng);
        let data = mean.iter().zip(eps.data()).map(|(m, e)| m + sd * e).collect();
        x0_hat.with_data(data)
    }
}
