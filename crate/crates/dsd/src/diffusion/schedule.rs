//! Linear-beta noise schedule and the closed-form forward noising step.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Cumulative signal coefficients over discrete timesteps. `alpha_bar[0]`
/// is exactly 1 (t = 0 means no noising); `alpha_bar[t]` is the product of
/// `1 - beta_s` for s in 1..=t.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Betas interpolate linearly from `beta_min` at t = 1 to `beta_max` at
/// t = `timesteps`.
pub fn make_schedule(timesteps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::Parameter("schedule needs at least one step".into()));
    }
    if !(0.0 < beta_min && beta_min < beta_max && beta_max < 1.0) {
        return Err(Error::Parameter(format!(
            "need 0 < beta_min < beta_max < 1, got {beta_min} and {beta_max}"
        )));
    }
    let mut betas = Vec::with_capacity(timesteps);
    let mut alpha_bar = Vec::with_capacity(timesteps + 1);
    alpha_bar.push(1.0);
    let mut acc = 1.0;
    for t in 0..timesteps {
        let frac = if timesteps == 1 {
            0.0
        } else {
            t as f64 / (timesteps - 1) as f64
        };
        let beta = beta_min + (beta_max - beta_min) * frac;
        acc *= 1.0 - beta;
        betas.push(beta);
        alpha_bar.push(acc);
    }
    Ok(NoiseSchedule { betas, alpha_bar })
}

impl NoiseSchedule {
    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::Parameter(format!(
                "beta defined for t in 1..={}, got {t}",
                self.betas.len()
            )));
        }
        Ok(self.betas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or_else(|| {
            Error::Parameter(format!(
                "timestep {t} out of range 0..={}",
                self.timesteps()
            ))
        })
    }

    /// Map a fractional noise level in (0, 1) to a discrete timestep,
    /// `round(level * T)`, clamped into 1..=T.
    pub fn timestep_for_level(&self, level: f64) -> Result<usize> {
        if !(0.0 < level && level < 1.0) {
            return Err(Error::Parameter(format!(
                "noise level must lie in (0, 1), got {level}"
            )));
        }
        let t = (level * self.timesteps() as f64).round() as usize;
        Ok(t.clamp(1, self.timesteps()))
    }
}

/// `z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn noise_latent(
    z0: &Tensor,
    t: usize,
    eps: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if !z0.same_shape(eps) {
        return Err(Error::Dimension(format!(
            "noise_latent: z0 shape {:?} vs eps shape {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(t)?;
    let (signal, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = z0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&z, &e)| signal * z + noise * e)
        .collect();
    Tensor::new(z0.shape().to_vec(), data)
}
