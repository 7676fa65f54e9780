//! Long-range and short-range guidance, the guided factor, interval gating
//! and the full guided purification loop.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::operators::{self, Operator};
use crate::par::{self, Execution};
use crate::rng;
use crate::sampler::{self, JacobianMode, ReverseTrajectory, TrajectoryState};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;

/// Coordinates with `|x_hat - y|` below this contribute nothing to the L1
/// cotangent.
pub const L1_DEADZONE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Norm {
    L1,
    L2,
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Self::L1),
            "l2" => Ok(Self::L2),
            other => Err(Error::InvalidArgument(format!("unknown norm `{other}`"))),
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::L1 => "L1",
            Self::L2 => "L2",
        })
    }
}

impl Norm {
    /// Gradient of the distance with respect to its first argument. L2 is the
    /// squared Euclidean distance.
    pub fn grad(self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::L1 => Ok(operators::sign_deadzone(&operators::diff(a, b)?, L1_DEADZONE)),
            Self::L2 => operators::l2_grad(a, b),
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            Self::L1 => operators::l1_dist(a, b),
            Self::L2 => operators::l2_sq_dist(a, b),
        }
    }
}

/// Scale `R_t` applied to each guidance term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum FactorRule {
    /// `1 / sigma_t^2` with `sigma_t` the signal fraction of the schedule.
    InverseSigmaSquared,
    /// `1 / (1 - sigma_t)`, reading `sigma_t` as the noise standard deviation
    /// `sqrt(1 - sigma_t)` instead.
    InverseNoiseVariance,
    Constant(f64),
}

impl FromStr for FactorRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse-sigma-squared" => Ok(Self::InverseSigmaSquared),
            "inverse-noise-variance" => Ok(Self::InverseNoiseVariance),
            other => match other.strip_prefix("constant:").map(str::parse::<f64>) {
                Some(Ok(c)) => Ok(Self::Constant(c)),
                _ => Err(Error::InvalidArgument(format!("unknown factor rule `{other}`"))),
            },
        }
    }
}

impl fmt::Display for FactorRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InverseSigmaSquared => f.write_str("inverse-sigma-squared"),
            Self::InverseNoiseVariance => f.write_str("inverse-noise-variance"),
            Self::Constant(c) => write!(f, "constant:{c}"),
        }
    }
}

pub fn guided_factor(schedule: &NoiseSchedule, t: usize, rule: FactorRule) -> Result<f64> {
    schedule.check_time(t, 0)?;
    let s = schedule.sigma(t);
    match rule {
        FactorRule::Constant(c) => Ok(c),
        FactorRule::InverseSigmaSquared if s > 0.0 => Ok(1.0 / (s * s)),
        FactorRule::InverseNoiseVariance if s < 1.0 => Ok(1.0 / (1.0 - s)),
        FactorRule::InverseNoiseVariance => Err(Error::InvalidArgument(format!("no noise at t = {t}"))),
        FactorRule::InverseSigmaSquared => Err(Error::ZeroSigma(t)),
    }
}

/// Steps `e <= t <= s` at which guidance is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidanceInterval {
    pub start: usize,
    pub end: usize,
}

impl GuidanceInterval {
    /// `s = floor(0.5 T)`, `e = floor(0.2 T)`.
    pub fn middle_phase(steps: usize) -> Self {
        Self { start: steps / 2, end: steps / 5 }
    }

    /// Every reverse step `T..=1`.
    pub fn full(steps: usize) -> Self {
        Self { start: steps, end: 1 }
    }

    pub fn contains(&self, t: usize) -> bool {
        self.end <= t && t <= self.start
    }

    /// Number of reverse steps `t in 1..=T` inside the interval.
    pub fn guided_steps(&self, steps: usize) -> usize {
        (1..=steps).filter(|&t| self.contains(t)).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub use_long: bool,
    pub use_short: bool,
    pub norm: Norm,
    pub operator: Operator,
    pub interval: GuidanceInterval,
    pub factor: FactorRule,
    pub jacobian: JacobianMode,
    /// Global multiplier on both terms.
    pub scale: f64,
}

impl GuidanceConfig {
    /// Both terms, L1, middle-phase gating, `R_t = 1 / sigma_t^2`.
    pub fn mimic(steps: usize, operator: Operator) -> Self {
        Self {
            use_long: true,
            use_short: true,
            norm: Norm::L1,
            operator,
            interval: GuidanceInterval::middle_phase(steps),
            factor: FactorRule::InverseSigmaSquared,
            jacobian: JacobianMode::ExactVjp,
            scale: 1.0,
        }
    }

    pub fn disabled(steps: usize) -> Self {
        Self { use_long: false, use_short: false, ..Self::mimic(steps, Operator::Identity) }
    }

    pub fn enabled(&self) -> bool {
        self.use_long || self.use_short
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        let GuidanceInterval { start, end } = self.interval;
        if !(start <= schedule.steps() && start > end) {
            return Err(Error::InvalidArgument(format!(
                "guidance interval needs T >= s > e >= 0, got s = {start}, e = {end}, T = {}",
                schedule.steps()
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::InvalidArgument("guidance scale must be finite".into()));
        }
        Ok(())
    }
}

/// Guidance target with its image under the operator precomputed.
#[derive(Debug, Clone)]
pub struct Target<'a> {
    pub y: &'a [f64],
    lifted: Option<Vec<f64>>,
}

impl<'a> Target<'a> {
    pub fn new(y: &'a [f64], config: &GuidanceConfig) -> Result<Self> {
        let lifted = if config.use_short {
            config.operator.check_input(y.len())?;
            Some(config.operator.apply(y)?)
        } else {
            None
        };
        Ok(Self { y, lifted })
    }
}

/// Both guidance terms at one step; a disabled term is `None`.
#[derive(Debug, Clone)]
pub struct GuidanceTerms {
    pub x_hat: Vec<f64>,
    pub long: Option<Vec<f64>>,
    pub short: Option<Vec<f64>>,
}

impl GuidanceTerms {
    pub fn combined(&self) -> Result<Vec<f64>> {
        match (&self.long, &self.short) {
            (Some(l), Some(s)) => Ok(l.iter().zip(s).map(|(a, b)| a + b).collect()),
            (Some(l), None) => Ok(l.clone()),
            (None, Some(s)) => Ok(s.clone()),
            (None, None) => Err(Error::InvalidArgument("no guidance term enabled".into())),
        }
    }
}

/// Computes the enabled terms given an already evaluated Tweedie estimate
/// `x_hat` of `x_t`.
pub fn guidance_terms_from_estimate(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    x_hat: Vec<f64>,
    target: &Target<'_>,
    config: &GuidanceConfig,
) -> Result<GuidanceTerms> {
    check_dim(x_t.len(), target.y.len())?;
    let r = guided_factor(schedule, t, config.factor)?;
    let coeff = -config.scale * r;
    let mut cotangents = Vec::with_capacity(2);
    if config.use_long {
        cotangents.push(config.norm.grad(&x_hat, target.y)?);
    }
    if config.use_short {
        let lifted_y = target.lifted.as_ref().expect("target prepared for short-range term");
        let hx = config.operator.apply(&x_hat)?;
        let w = config.norm.grad(&hx, lifted_y)?;
        cotangents.push(config.operator.vjp(&x_hat, &w)?);
    }
    let refs: Vec<&[f64]> = cotangents.iter().map(Vec::as_slice).collect();
    let mut pulled = sampler::estimate_pullbacks(model, schedule, x_t, t, &refs, config.jacobian)?.into_iter();
    let mut next = |on: bool| -> Result<Option<Vec<f64>>> {
        if !on {
            return Ok(None);
        }
        let g: Vec<f64> = pulled.next().expect("one pullback per term").into_iter().map(|p| coeff * p).collect();
        check_finite(&g, t, "guidance gradient")?;
        Ok(Some(g))
    };
    let long = next(config.use_long)?;
    let short = next(config.use_short)?;
    Ok(GuidanceTerms { x_hat, long, short })
}

pub fn guidance_terms(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    target: &Target<'_>,
    config: &GuidanceConfig,
) -> Result<GuidanceTerms> {
    schedule.check_time(t, 1)?;
    let x_hat = sampler::tweedie_estimate(model, schedule, x_t, t)?;
    guidance_terms_from_estimate(model, schedule, x_t, t, x_hat, target, config)
}

/// `-R_t grad_{x_t} d(x_hat_t, y)`.
pub fn long_range_guidance(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    target: &[f64],
    config: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let cfg = GuidanceConfig { use_long: true, use_short: false, ..config.clone() };
    let prepared = Target::new(target, &cfg)?;
    Ok(guidance_terms(model, schedule, x_t, t, &prepared, &cfg)?.long.expect("long term enabled"))
}

/// `-R_t grad_{x_t} d(H(x_hat_t), H(y))`.
pub fn short_range_guidance(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    target: &[f64],
    config: &GuidanceConfig,
) -> Result<Vec<f64>> {
    let cfg = GuidanceConfig { use_long: false, use_short: true, ..config.clone() };
    config.operator.check_input(x_t.len())?;
    let prepared = Target::new(target, &cfg)?;
    Ok(guidance_terms(model, schedule, x_t, t, &prepared, &cfg)?.short.expect("short term enabled"))
}

/// Sum of the enabled terms, each scaled by the same `R_t`.
pub fn combined_guidance(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_t: &[f64],
    t: usize,
    target: &[f64],
    config: &GuidanceConfig,
) -> Result<Vec<f64>> {
    if !config.enabled() {
        return Err(Error::InvalidArgument("no guidance term enabled".into()));
    }
    let prepared = Target::new(target, config)?;
    guidance_terms(model, schedule, x_t, t, &prepared, config)?.combined()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceRecord {
    pub t: usize,
    pub gated: bool,
    pub norm_long: f64,
    pub norm_short: f64,
    /// `min_abs(x_hat_t - x_ori)` when a clean reference was supplied.
    pub min_abs_to_clean: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTiming {
    pub reverse: Duration,
    pub guidance: Duration,
}

#[derive(Debug, Clone)]
pub struct PurifyResult {
    pub x0: Vec<f64>,
    /// Empty unless trajectory recording was requested.
    pub trajectory: ReverseTrajectory,
    pub log: Vec<GuidanceRecord>,
    pub timing: PhaseTiming,
    /// Number of steps at which guidance was evaluated.
    pub guidance_evaluations: usize,
}

impl PurifyResult {
    /// CSV with columns `t,gated,norm_gl,norm_gs,minabs_to_ori`; the last
    /// column is empty when no clean reference was given.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("t,gated,norm_gl,norm_gs,minabs_to_ori\n");
        for r in &self.log {
            let m = r.min_abs_to_clean.map(|v| format!("{v:.17e}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.17e},{:.17e},{}\n",
                r.t,
                u8::from(r.gated),
                r.norm_long,
                r.norm_short,
                m
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Default)]
pub struct PurifyOptions<'a> {
    pub record_trajectory: bool,
    /// Clean sample, used only for the `min_abs_to_clean` diagnostic.
    pub clean_reference: Option<&'a [f64]>,
}

/// Guided reverse diffusion from pure noise toward `x_adv`.
///
/// At every step the unguided ancestral update produces `x_{t-1}`; when
/// `e <= t <= s` the combined guidance evaluated at `x_t` is then added to
/// it.
pub fn purify(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_adv: &[f64],
    config: &GuidanceConfig,
    seed: u64,
) -> Result<PurifyResult> {
    purify_with(model, schedule, x_adv, config, seed, &PurifyOptions { record_trajectory: true, clean_reference: None })
}

pub fn purify_with(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_adv: &[f64],
    config: &GuidanceConfig,
    seed: u64,
    opts: &PurifyOptions<'_>,
) -> Result<PurifyResult> {
    let n = model.dim();
    check_dim(n, x_adv.len())?;
    check_finite(x_adv, schedule.steps(), "guidance target")?;
    if let Some(c) = opts.clean_reference {
        check_dim(n, c.len())?;
    }
    config.validate(schedule)?;
    let target = Target::new(x_adv, config)?;
    let mut r = sampler::sampler_rng(seed);
    let mut x = rng::normal_vec(&mut r, n);
    let steps = schedule.steps();
    let mut log = Vec::with_capacity(steps);
    let mut states = Vec::new();
    let mut timing = PhaseTiming::default();
    let mut evaluations = 0;
    for t in (1..=steps).rev() {
        let clock = Instant::now();
        let (mut next, x_hat) = sampler::reverse_step_with_estimate(model, schedule, &x, t, &mut r)?;
        timing.reverse += clock.elapsed();
        let gated = config.enabled() && config.interval.contains(t);
        let mut record = GuidanceRecord {
            t,
            gated,
            norm_long: 0.0,
            norm_short: 0.0,
            min_abs_to_clean: match opts.clean_reference {
                Some(c) => Some(operators::min_abs(&operators::diff(&x_hat, c)?)?),
                None => None,
            },
        };
        if gated {
            let clock = Instant::now();
            let terms = guidance_terms_from_estimate(model, schedule, &x, t, x_hat.clone(), &target, config)?;
            for (dst, g) in [(&mut record.norm_long, &terms.long), (&mut record.norm_short, &terms.short)] {
                if let Some(g) = g {
                    *dst = g.iter().map(|v| v.abs()).sum();
                }
            }
            let g = terms.combined()?;
            next.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            evaluations += 1;
            timing.guidance += clock.elapsed();
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { t, what: "guided state" });
        }
        log.push(record);
        if opts.record_trajectory {
            states.push(TrajectoryState { t, x: std::mem::replace(&mut x, next), x_hat });
        } else {
            x = next;
        }
    }
    if opts.record_trajectory {
        let x_hat = sampler::tweedie_estimate(model, schedule, &x, 0)?;
        states.push(TrajectoryState { t: 0, x: x.clone(), x_hat });
    }
    Ok(PurifyResult {
        x0: x,
        trajectory: ReverseTrajectory { seed, states },
        log,
        timing,
        guidance_evaluations: evaluations,
    })
}

/// Purifies `targets[i]` with seed `seeds[i]`; returns the final states in
/// input order.
pub fn purify_batch(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    targets: &[Vec<f64>],
    config: &GuidanceConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<Vec<f64>>> {
    check_dim(targets.len(), seeds.len())?;
    par::try_map_indexed(exec, targets.len(), |i| {
        purify_with(model, schedule, &targets[i], config, seeds[i], &PurifyOptions::default()).map(|r| r.x0)
    })
}
