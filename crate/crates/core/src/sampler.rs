//! Ancestral reverse diffusion and the Tweedie estimate.
//!
//! The estimate is usually written for a noise predictor,
//! `x_hat = (x_t - sqrt(1 - sigma) eps_hat) / sqrt(sigma)`. Models here
//! return scores, and `eps_hat = -sqrt(1 - sigma) * score`, so the same
//! estimate reads `x_hat = (x_t + (1 - sigma) score) / sqrt(sigma)`, which is
//! the posterior mean `E[x_0 | x_t]` for an exact score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::par::{self, Execution};
use crate::rng::{self, LabRng};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;
use crate::tensor_io::Tensor;

/// `x_hat = (x_t + (1 - sigma_t) * score(x_t, t)) / sqrt(sigma_t)`.
pub fn tweedie_estimate(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    schedule.check_time(t, 0)?;
    let tp = schedule.at(t);
    if tp.sigma <= 0.0 {
        return Err(Error::ZeroSigma(t));
    }
    let s = model.score(x_t, tp)?;
    Ok(tweedie_from_score(x_t, &s, tp.sigma))
}

pub(crate) fn tweedie_from_score(x_t: &[f64], score: &[f64], sigma: f64) -> Vec<f64> {
    let a = 1.0 - sigma;
    let inv = 1.0 / sigma.sqrt();
    x_t.iter().zip(score).map(|(x, s)| (x + a * s) * inv).collect()
}

/// How the guidance gradient is pulled back through `d x_hat / d x_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianMode {
    /// Exact `(I + (1 - sigma) J_s)^T / sqrt(sigma)` via the score VJP.
    #[default]
    ExactVjp,
    /// Treats `d x_hat / d x_t` as the identity.
    JacobianFree,
}

/// `v^T d x_hat / d x_t` at `(x_t, t)`.
pub fn estimate_pullback(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    v: &[f64],
    mode: JacobianMode,
) -> Result<Vec<f64>> {
    check_dim(x_t.len(), v.len())?;
    match mode {
        JacobianMode::JacobianFree => Ok(v.to_vec()),
        JacobianMode::ExactVjp => {
            let tp = schedule.at(t);
            if tp.sigma <= 0.0 {
                return Err(Error::ZeroSigma(t));
            }
            let jv = model.score_vjp(x_t, tp, v)?;
            let a = 1.0 - tp.sigma;
            let inv = 1.0 / tp.sigma.sqrt();
            Ok(v.iter().zip(&jv).map(|(vi, ji)| (vi + a * ji) * inv).collect())
        }
    }
}

/// [`estimate_pullback`] for several cotangents, sharing model work.
pub fn estimate_pullbacks(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    vs: &[&[f64]],
    mode: JacobianMode,
) -> Result<Vec<Vec<f64>>> {
    for v in vs {
        check_dim(x_t.len(), v.len())?;
    }
    match mode {
        JacobianMode::JacobianFree => Ok(vs.iter().map(|v| v.to_vec()).collect()),
        JacobianMode::ExactVjp => {
            let tp = schedule.at(t);
            if tp.sigma <= 0.0 {
                return Err(Error::ZeroSigma(t));
            }
            let a = 1.0 - tp.sigma;
            let inv = 1.0 / tp.sigma.sqrt();
            let jvs = model.score_vjps(x_t, tp, vs)?;
            Ok(vs
                .iter()
                .zip(jvs)
                .map(|(v, jv)| v.iter().zip(&jv).map(|(vi, ji)| (vi + a * ji) * inv).collect())
                .collect())
        }
    }
}

/// Tweedie estimate plus the pullback of a cotangent computed from it.
/// `cotangent` receives `x_hat` and returns `v`.
pub fn tweedie_pullback<F>(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    mode: JacobianMode,
    cotangent: F,
) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: FnOnce(&[f64]) -> Result<Vec<f64>>,
{
    schedule.check_time(t, 1)?;
    let x_hat = tweedie_estimate(model, schedule, x_t, t)?;
    let v = cotangent(&x_hat)?;
    let pulled = estimate_pullback(model, schedule, x_t, t, &v, mode)?;
    Ok((x_hat, pulled))
}

/// Coefficients of the Gaussian `q(x_{t-1} | x_t, x_0)`.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorCoefficients {
    pub on_estimate: f64,
    pub on_state: f64,
    pub variance: f64,
}

pub fn posterior_coefficients(schedule: &NoiseSchedule, t: usize) -> PosteriorCoefficients {
    let s_t = schedule.sigma(t);
    let s_prev = schedule.sigma(t - 1);
    let alpha = schedule.alpha(t);
    let beta = 1.0 - alpha;
    let denom = 1.0 - s_t;
    PosteriorCoefficients {
        on_estimate: s_prev.sqrt() * beta / denom,
        on_state: alpha.sqrt() * (1.0 - s_prev) / denom,
        variance: ((1.0 - s_prev) / denom * beta).max(0.0),
    }
}

/// One ancestral step. Returns `(x_{t-1}, x_hat_t)`.
pub fn reverse_step_with_estimate(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    rng: &mut LabRng,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_time(t, 1)?;
    let x_hat = tweedie_estimate(model, schedule, x_t, t)?;
    check_finite(&x_hat, t, "tweedie estimate")?;
    let c = posterior_coefficients(schedule, t);
    let mut next: Vec<f64> = x_hat.iter().zip(x_t).map(|(h, x)| c.on_estimate * h + c.on_state * x).collect();
    if t > 1 && c.variance > 0.0 {
        let sd = c.variance.sqrt();
        for v in next.iter_mut() {
            *v += sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    check_finite(&next, t, "reverse step output")?;
    Ok((next, x_hat))
}

pub fn reverse_step(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    rng: &mut LabRng,
) -> Result<Vec<f64>> {
    Ok(reverse_step_with_estimate(model, schedule, x_t, t, rng)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryState {
    pub t: usize,
    pub x: Vec<f64>,
    pub x_hat: Vec<f64>,
}

/// States from `t = T` down to `t = 0`, each with its Tweedie estimate.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReverseTrajectory {
    pub seed: u64,
    pub states: Vec<TrajectoryState>,
}

impl ReverseTrajectory {
    pub fn final_state(&self) -> Option<&[f64]> {
        self.states.last().map(|s| s.x.as_slice())
    }

    /// Rank-3 tensors `[T+1, 2, n]` (state, estimate) in time order T..0,
    /// preceded by the time indices.
    pub fn to_tensors(&self) -> Vec<Tensor> {
        let n = self.states.first().map_or(0, |s| s.x.len());
        let ts = Tensor::vector(self.states.iter().map(|s| s.t as f64).collect());
        let mut data = Vec::with_capacity(self.states.len() * 2 * n);
        for s in &self.states {
            data.extend_from_slice(&s.x);
            data.extend_from_slice(&s.x_hat);
        }
        vec![ts, Tensor { dims: vec![self.states.len(), 2, n], data }]
    }

    /// Per-step CSV: `t,norm1_x,norm1_x_hat`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,norm1_x,norm1_x_hat\n");
        for s in &self.states {
            let a: f64 = s.x.iter().map(|v| v.abs()).sum();
            let b: f64 = s.x_hat.iter().map(|v| v.abs()).sum();
            out.push_str(&format!("{},{:.17e},{:.17e}\n", s.t, a, b));
        }
        out
    }
}

/// Stream id used for the reverse-process noise of a run.
pub const SAMPLER_STREAM: u64 = 0;

pub fn sampler_rng(seed: u64) -> LabRng {
    rng::stream(seed, SAMPLER_STREAM)
}

/// Runs the unguided reverse process from `x_T ~ N(0, I)`.
pub fn sample_unconditional(model: &dyn ScoreModel, schedule: &NoiseSchedule, seed: u64) -> Result<ReverseTrajectory> {
    let mut r = sampler_rng(seed);
    let steps = schedule.steps();
    let mut x = rng::normal_vec(&mut r, model.dim());
    let mut states = Vec::with_capacity(steps + 1);
    for t in (1..=steps).rev() {
        let (next, x_hat) = reverse_step_with_estimate(model, schedule, &x, t, &mut r)?;
        states.push(TrajectoryState { t, x: std::mem::replace(&mut x, next), x_hat });
    }
    let x_hat = tweedie_estimate(model, schedule, &x, 0)?;
    states.push(TrajectoryState { t: 0, x, x_hat });
    Ok(ReverseTrajectory { seed, states })
}

/// Endpoint-only sampling for many seeds.
pub fn sample_final_batch(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    par::try_map_indexed(exec, seeds.len(), |i| {
        let mut r = sampler_rng(seeds[i]);
        let mut x = rng::normal_vec(&mut r, model.dim());
        for t in (1..=schedule.steps()).rev() {
            x = reverse_step(model, schedule, &x, t, &mut r)?;
        }
        Ok(x)
    })
}
