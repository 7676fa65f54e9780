//! Discrete noise schedule in the signal-fraction convention.
//!
//! `sigma[t]` is the fraction of signal variance left at step `t`, so the
//! forward marginal is `x_t = sqrt(sigma[t]) * x + sqrt(1 - sigma[t]) * eps`.
//! `sigma[0] = 1` (clean data) and `sigma[T] <= 1e-4` (indistinguishable
//! from pure noise).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::tensor_io::Tensor;

/// Largest per-step beta; keeps every `sigma[t]` strictly positive.
pub const MAX_BETA: f64 = 0.9999;
/// Upper bound on the terminal signal fraction.
pub const TERMINAL_SIGMA: f64 = 1e-4;

const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-beta" | "linear" => Ok(Self::LinearBeta),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LinearBeta => "linear-beta",
            Self::Cosine => "cosine",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    sigma: Vec<f64>,
}

/// Per-step betas of the linear schedule, `beta_1..=beta_T`.
///
/// The endpoints scale as `0.1 / T` and `20 / T` (the continuous VP
/// parameterisation), so the summed beta stays near 10 for any `T` and the
/// terminal fraction lands below `TERMINAL_SIGMA`.
pub fn linear_betas(steps: usize) -> Vec<f64> {
    let t = steps as f64;
    let (lo, hi) = (0.1 / t, 20.0 / t);
    (1..=steps)
        .map(|i| {
            let frac = (i - 1) as f64 / (steps - 1) as f64;
            (lo + (hi - lo) * frac).min(MAX_BETA)
        })
        .collect()
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let f = |i: usize| {
        let u = (i as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (u * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    let f0 = f(0);
    (1..=steps)
        .map(|i| {
            let (prev, cur) = (f(i - 1) / f0, f(i) / f0);
            (1.0 - cur / prev).clamp(0.0, MAX_BETA)
        })
        .collect()
}

impl NoiseSchedule {
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!("schedule needs T >= 2, got {steps}")));
        }
        let betas = match kind {
            ScheduleKind::LinearBeta => linear_betas(steps),
            ScheduleKind::Cosine => cosine_betas(steps),
        };
        let mut sigma = Vec::with_capacity(steps + 1);
        sigma.push(1.0);
        let mut acc = 1.0;
        for b in betas {
            acc *= 1.0 - b;
            sigma.push(acc);
        }
        Self::from_sigma(sigma)
    }

    /// Builds a schedule from an explicit table, checking every invariant.
    pub fn from_sigma(sigma: Vec<f64>) -> Result<Self> {
        if sigma.len() < 3 {
            return Err(Error::InvalidArgument("sigma table needs at least 3 entries".into()));
        }
        if sigma[0] != 1.0 {
            return Err(Error::InvalidArgument("sigma[0] must be 1".into()));
        }
        if let Some(i) = sigma.iter().position(|&s| !(s.is_finite() && s > 0.0 && s <= 1.0)) {
            return Err(Error::InvalidArgument(format!("sigma[{i}] = {} not in (0, 1]", sigma[i])));
        }
        if let Some(i) = sigma.windows(2).position(|w| w[1] > w[0]) {
            return Err(Error::InvalidArgument(format!("sigma increases at t = {}", i + 1)));
        }
        let last = *sigma.last().unwrap();
        if last > TERMINAL_SIGMA {
            return Err(Error::InvalidArgument(format!("terminal sigma {last} exceeds {TERMINAL_SIGMA}")));
        }
        Ok(Self { sigma })
    }

    /// Total number of reverse steps `T`.
    pub fn steps(&self) -> usize {
        self.sigma.len() - 1
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigma
    }

    /// Per-step retention `sigma[t] / sigma[t-1]`, for `t >= 1`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.sigma[t] / self.sigma[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    pub fn check_time(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.steps() {
            Err(Error::TimeOutOfRange { t, lo, hi: self.steps() })
        } else {
            Ok(())
        }
    }

    /// `sqrt(sigma[t]) * x + sqrt(1 - sigma[t]) * noise`, elementwise.
    pub fn forward_diffuse(&self, x: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t, 1)?;
        check_dim(x.len(), noise.len())?;
        let s = self.sigma[t];
        let (a, b) = (s.sqrt(), (1.0 - s).sqrt());
        Ok(x.iter().zip(noise).map(|(xi, ni)| a * xi + b * ni).collect())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.sigma.clone())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.dims.len() != 1 {
            return Err(Error::Format("schedule tensor must be rank 1".into()));
        }
        Self::from_sigma(t.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invariants_hold_for_every_small_t() {
        for steps in (2..=300).chain([500, 1000, 2000]) {
            for kind in [ScheduleKind::LinearBeta, ScheduleKind::Cosine] {
                let s = NoiseSchedule::new(steps, kind).unwrap();
                assert_eq!(s.sigmas().len(), steps + 1);
                assert!(s.sigma(steps) <= TERMINAL_SIGMA, "{kind} T={steps}");
            }
        }
    }

    #[test]
    fn t100_linear_terminal_and_monotone() {
        let s = NoiseSchedule::new(100, ScheduleKind::LinearBeta).unwrap();
        assert!(s.sigma(100) <= 1e-4);
        assert!(s.sigmas().windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn t2_cosine_has_three_entries() {
        let s = NoiseSchedule::new(2, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.sigmas().len(), 3);
        assert_eq!(s.sigma(0), 1.0);
    }

    #[test]
    fn sigma50_matches_scalar_product() {
        // Independent recurrence: recompute each beta from scratch.
        let steps = 100usize;
        let mut prod = 1.0f64;
        for i in 1..=50 {
            let beta = 0.1 / 100.0 + (20.0 / 100.0 - 0.1 / 100.0) * ((i - 1) as f64) / 99.0;
            prod *= 1.0 - beta;
        }
        let s = NoiseSchedule::new(steps, ScheduleKind::LinearBeta).unwrap();
        assert!((s.sigma(50) - prod).abs() <= 1e-15 * prod.max(1.0), "{} vs {prod}", s.sigma(50));
        // frozen value of the same product
        assert!((prod - 0.074_196_996_717_42).abs() < 1e-9, "{prod}");
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(NoiseSchedule::new(1, ScheduleKind::LinearBeta).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
        assert!(NoiseSchedule::from_sigma(vec![1.0, 0.5, 0.6, 1e-5]).is_err());
        assert!(NoiseSchedule::from_sigma(vec![1.0, 0.5, 0.1]).is_err());
        assert!(NoiseSchedule::from_sigma(vec![1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn forward_diffuse_cases() {
        let s = NoiseSchedule::new(100, ScheduleKind::LinearBeta).unwrap();
        let z = vec![0.3, -1.2, 2.0];
        let out = s.forward_diffuse(&[0.0; 3], 40, &z).unwrap();
        let c = (1.0 - s.sigma(40)).sqrt();
        for (o, zi) in out.iter().zip(&z) {
            assert_eq!(*o, c * zi);
        }
        assert!(s.forward_diffuse(&[0.0; 2], 40, &z).is_err());
        assert!(s.forward_diffuse(&[0.0; 3], 0, &z).is_err());
        assert!(s.forward_diffuse(&[0.0; 3], 101, &z).is_err());

        // A custom table with sigma[1] = 1 is the identity at t = 1.
        let id = NoiseSchedule::from_sigma(vec![1.0, 1.0, 1e-5]).unwrap();
        let x = vec![1.5, -0.25];
        assert_eq!(id.forward_diffuse(&x, 1, &[9.0, 9.0]).unwrap(), x);
    }

    #[test]
    fn forward_of_adversarial_expands() {
        let s = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
        let xo = [0.2, -0.7, 0.9];
        let phi = [0.03, -0.01, 0.02];
        let eps = [1.1, 0.4, -0.6];
        let xadv: Vec<f64> = xo.iter().zip(&phi).map(|(a, b)| a + b).collect();
        let out = s.forward_diffuse(&xadv, 30, &eps).unwrap();
        let st = s.sigma(30);
        for i in 0..3 {
            let expect = st.sqrt() * (xo[i] + phi[i]) + (1.0 - st).sqrt() * eps[i];
            assert!((out[i] - expect).abs() < 1e-15);
        }
    }
}
