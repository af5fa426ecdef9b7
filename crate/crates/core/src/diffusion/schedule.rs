use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Cosine variance-preserving schedule: `alpha = cos(pi t / 2)`,
/// `sigma = sin(pi t / 2)`, with `t` clipped to `[eps, 1 - eps]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub eps: f64,
    pub steps: usize,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule { eps: 1e-3, steps: 256 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SchedulePoint {
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub lambda: f64,
}

impl NoiseSchedule {
    pub fn clip(&self, t: f64) -> f64 {
        t.clamp(self.eps, 1.0 - self.eps)
    }

    pub fn at(&self, t: f64) -> SchedulePoint {
        let t = self.clip(t);
        let (sigma, alpha) = (FRAC_PI_2 * t).sin_cos();
        SchedulePoint { t, alpha, sigma, lambda: 2.0 * (alpha / sigma).ln() }
    }

    /// `steps + 1` decreasing times from `1 - eps` to `eps`.
    pub fn grid(&self, steps: usize) -> Vec<f64> {
        let (hi, lo) = (1.0 - self.eps, self.eps);
        (0..=steps)
            .map(|i| if i == steps { lo } else { hi - (hi - lo) * i as f64 / steps as f64 })
            .collect()
    }
}

/// `x_t = alpha_t x_0 + sigma_t eps`.
pub fn q_sample(schedule: &NoiseSchedule, x0: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
    if x0.len() != noise.len() {
        return Err(Error::shape("q_sample", format!("x0 has {} entries, noise {}", x0.len(), noise.len())));
    }
    let p = schedule.at(t);
    Ok(x0.iter().zip(noise).map(|(x, e)| p.alpha * x + p.sigma * e).collect())
}

/// Mean and the two variance endpoints of one reverse step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub r: f64,
    /// Coefficient of `x_t` in the mean.
    pub c_xt: f64,
    /// Coefficient of `x_hat` in the mean.
    pub c_xhat: f64,
    /// Posterior variance `(1 - r) sigma_s^2`.
    pub var_posterior: f64,
    /// Forward variance `(1 - r) sigma_t^2`.
    pub var_forward: f64,
}

impl StepCoefficients {
    pub fn std(&self, gamma: f64) -> f64 {
        (self.var_posterior.powf(1.0 - gamma) * self.var_forward.powf(gamma)).sqrt()
    }
}

pub fn step_coefficients(schedule: &NoiseSchedule, t: f64, s: f64) -> Result<StepCoefficients> {
    if s >= t {
        return Err(Error::InvalidInput(format!("reverse step needs s < t, got s={s}, t={t}")));
    }
    let (pt, ps) = (schedule.at(t), schedule.at(s));
    let r = (pt.lambda - ps.lambda).exp();
    Ok(StepCoefficients {
        r,
        c_xt: r * ps.alpha / pt.alpha,
        c_xhat: (1.0 - r) * ps.alpha,
        var_posterior: (1.0 - r) * ps.sigma * ps.sigma,
        var_forward: (1.0 - r) * pt.sigma * pt.sigma,
    })
}

/// One ancestral step from `t` to `s` given the denoised estimate `x_hat`.
/// A step landing on the schedule floor (`s <= eps`) adds no noise.
pub fn ancestral_step(
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: f64,
    s: f64,
    x_hat: &[f64],
    gamma: f64,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if x_t.len() != x_hat.len() {
        return Err(Error::shape("ancestral_step", "x_t and x_hat differ in size"));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let k = step_coefficients(schedule, t, s)?;
    let std = if s <= schedule.eps { 0.0 } else { k.std(gamma) };
    Ok(x_t
        .iter()
        .zip(x_hat)
        .map(|(xt, xh)| {
            let mean = k.c_xt * xt + k.c_xhat * xh;
            if std > 0.0 {
                mean + std * rng::normal(rng)
            } else {
                mean
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn midpoint_is_balanced() {
        let p = NoiseSchedule::default().at(0.5);
        assert!((p.alpha - 0.5f64.sqrt()).abs() < 1e-15);
        assert!((p.sigma - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(p.lambda.abs() < 1e-12);
    }

    #[test]
    fn endpoints_are_clipped() {
        let s = NoiseSchedule::default();
        let lo = s.at(0.0);
        assert_eq!(lo.t, 1e-3);
        assert!(lo.lambda > 12.0 && lo.lambda.is_finite());
        assert!(s.at(1.0).lambda < -12.0);
        let g = s.grid(4);
        assert_eq!(g.len(), 5);
        assert_eq!(g[0], 1.0 - 1e-3);
        assert_eq!(g[4], 1e-3);
    }

    #[test]
    fn reverse_step_rejects_forward_time() {
        let s = NoiseSchedule::default();
        let mut r = rng::rng(0);
        assert!(ancestral_step(&s, &[0.0], 0.5, 0.5, &[0.0], 0.3, &mut r).is_err());
        assert!(ancestral_step(&s, &[0.0], 0.5, 0.2, &[0.0], 1.5, &mut r).is_err());
    }
}
