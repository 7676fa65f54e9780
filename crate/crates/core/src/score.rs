//! Score models `s(x, t) ~ grad_x log p_t(x)` and their vector-Jacobian
//! products.
//!
//! Everything here is expressed as a score. An epsilon-predicting network
//! converts with `score = -eps_hat / sqrt(1 - sigma_t)`; the trainable model
//! below is parameterised that way internally.

use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::nn::{Activation, Adam, Dense, Mlp};
use crate::rng;
use crate::schedule::NoiseSchedule;
use crate::tensor_io::Tensor;

/// A diffusion time: step index, total steps and signal fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePoint {
    pub t: usize,
    pub steps: usize,
    pub sigma: f64,
}

impl NoiseSchedule {
    pub fn at(&self, t: usize) -> TimePoint {
        TimePoint { t, steps: self.steps(), sigma: self.sigma(t) }
    }
}

pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn score(&self, x: &[f64], tp: TimePoint) -> Result<Vec<f64>>;

    /// `v^T J` where `J` is the Jacobian of the score at `(x, t)`.
    fn score_vjp(&self, x: &[f64], tp: TimePoint, v: &[f64]) -> Result<Vec<f64>>;

    /// Score and VJP together; models may share work between the two.
    fn score_and_vjp(&self, x: &[f64], tp: TimePoint, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.score(x, tp)?, self.score_vjp(x, tp, v)?))
    }

    /// VJPs of several cotangents at the same point.
    fn score_vjps(&self, x: &[f64], tp: TimePoint, vs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        vs.iter().map(|v| self.score_vjp(x, tp, v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Diagonal covariance.
    pub var: Vec<f64>,
}

/// Analytic score of a diagonal Gaussian mixture pushed through the
/// forward process: component means scale by `sqrt(sigma)` and covariances
/// become `sigma * var + (1 - sigma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmScoreModel {
    components: Vec<GmmComponent>,
    dim: usize,
}

struct Marginal {
    resp: Vec<f64>,
    /// per-component `-(x - m_k) / D_k`, row-major K x n
    comp_scores: Vec<f64>,
    /// per-component `1 / D_k`, row-major K x n
    inv_var: Vec<f64>,
    log_density: f64,
}

impl GmmScoreModel {
    pub fn new(components: Vec<GmmComponent>) -> Result<Self> {
        let first = components.first().ok_or(Error::Empty("mixture components"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::Empty("component mean"));
        }
        let mut total = 0.0;
        for c in &components {
            check_dim(dim, c.mean.len())?;
            check_dim(dim, c.var.len())?;
            if !(c.weight > 0.0 && c.weight <= 1.0) {
                return Err(Error::InvalidArgument(format!("weight {} not in (0, 1]", c.weight)));
            }
            if c.var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidArgument("covariance entries must be positive".into()));
            }
            check_finite(&c.mean, 0, "component mean")?;
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        Ok(Self { components, dim })
    }

    /// Single Gaussian `N(mean, diag(var))`.
    pub fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        Self::new(vec![GmmComponent { weight: 1.0, mean, var }])
    }

    pub fn components(&self) -> &[GmmComponent] {
        &self.components
    }

    fn marginal(&self, x: &[f64], tp: TimePoint) -> Result<Marginal> {
        check_dim(self.dim, x.len())?;
        check_finite(x, tp.t, "score input")?;
        let (n, k) = (self.dim, self.components.len());
        let a = tp.sigma.sqrt();
        let mut comp_scores = vec![0.0; k * n];
        let mut inv_var = vec![0.0; k * n];
        let mut logw = Vec::with_capacity(k);
        for (ci, c) in self.components.iter().enumerate() {
            let mut quad = 0.0;
            let mut logdet = 0.0;
            let mut prod = 1.0;
            let cs = &mut comp_scores[ci * n..(ci + 1) * n];
            let iv = &mut inv_var[ci * n..(ci + 1) * n];
            for i in 0..n {
                let d = tp.sigma * c.var[i] + (1.0 - tp.sigma);
                let r = x[i] - a * c.mean[i];
                let inv = 1.0 / d;
                iv[i] = inv;
                cs[i] = -r * inv;
                quad += r * r * inv;
                // one log per 16 factors
                prod *= d;
                if i % 16 == 15 {
                    logdet += prod.ln();
                    prod = 1.0;
                }
            }
            logdet += prod.ln();
            logw.push(c.weight.ln() - 0.5 * (quad + logdet + n as f64 * (2.0 * PI).ln()));
        }
        let mx = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logw.iter().map(|l| (l - mx).exp()).sum();
        let resp = logw.iter().map(|l| (l - mx).exp() / z).collect();
        Ok(Marginal { resp, comp_scores, inv_var, log_density: mx + z.ln() })
    }

    pub fn log_density(&self, x: &[f64], tp: TimePoint) -> Result<f64> {
        Ok(self.marginal(x, tp)?.log_density)
    }

    fn mean_score(&self, m: &Marginal) -> Vec<f64> {
        let n = self.dim;
        let mut s = vec![0.0; n];
        for (ci, r) in m.resp.iter().enumerate() {
            for (si, cs) in s.iter_mut().zip(&m.comp_scores[ci * n..(ci + 1) * n]) {
                *si += r * cs;
            }
        }
        s
    }

    // J = sum_k r_k (s_k s_k^T - diag(1/D_k)) - s s^T, symmetric.
    fn vjp_from(&self, m: &Marginal, mean: &[f64], v: &[f64]) -> Vec<f64> {
        let n = self.dim;
        let sv: f64 = mean.iter().zip(v).map(|(a, b)| a * b).sum();
        let mut out: Vec<f64> = mean.iter().map(|s| -s * sv).collect();
        for (ci, r) in m.resp.iter().enumerate() {
            if *r == 0.0 {
                continue;
            }
            let cs = &m.comp_scores[ci * n..(ci + 1) * n];
            let iv = &m.inv_var[ci * n..(ci + 1) * n];
            let dot: f64 = cs.iter().zip(v).map(|(a, b)| a * b).sum();
            for i in 0..n {
                out[i] += r * (cs[i] * dot - iv[i] * v[i]);
            }
        }
        out
    }
}

impl ScoreModel for GmmScoreModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], tp: TimePoint) -> Result<Vec<f64>> {
        let m = self.marginal(x, tp)?;
        Ok(self.mean_score(&m))
    }

    fn score_vjp(&self, x: &[f64], tp: TimePoint, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.score_and_vjp(x, tp, v)?.1)
    }

    fn score_vjps(&self, x: &[f64], tp: TimePoint, vs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        for v in vs {
            check_dim(self.dim, v.len())?;
            check_finite(v, tp.t, "vjp cotangent")?;
        }
        let m = self.marginal(x, tp)?;
        let s = self.mean_score(&m);
        Ok(vs.iter().map(|v| self.vjp_from(&m, &s, v)).collect())
    }

    fn score_and_vjp(&self, x: &[f64], tp: TimePoint, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim, v.len())?;
        check_finite(v, tp.t, "vjp cotangent")?;
        let m = self.marginal(x, tp)?;
        let s = self.mean_score(&m);
        let j = self.vjp_from(&m, &s, v);
        Ok((s, j))
    }
}

/// Number of scalar time features fed to the network.
pub const TIME_FEATURES: usize = 7;

/// Fixed feature map of `tau = t / T`.
pub fn time_features(tp: TimePoint) -> [f64; TIME_FEATURES] {
    let tau = tp.t as f64 / tp.steps as f64;
    let w = PI * tau;
    [tau, w.sin(), w.cos(), (2.0 * w).sin(), (2.0 * w).cos(), (4.0 * w).sin(), (4.0 * w).cos()]
}

/// Small trainable score network.
///
/// With `g = mlp([x, phi(t)]) + S x` (a linear skip `S`) the score is
/// `-g / sqrt(1 - sigma_t + sigma_t v)`, where `v` is the per-coordinate
/// variance of the training data. Training minimises the noise-prediction
/// loss through `eps_hat = -sqrt(1 - sigma_t) * score`. Where the noise
/// dominates this is plain noise prediction; unlike it, the score stays
/// finite at `t = 0`, and for unit-variance Gaussian data `g = x` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct NetScoreModel {
    mlp: Mlp,
    skip: Dense,
    dim: usize,
    data_var: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetTrainParams {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of the dataset held out for the reported loss.
    pub holdout: f64,
}

impl Default for NetTrainParams {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Silu,
            steps: 2000,
            batch: 64,
            lr: 2e-3,
            seed: 0,
            holdout: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
    /// Mean training loss every `LOSS_LOG_EVERY` steps.
    pub curve: Vec<f64>,
}

pub const LOSS_LOG_EVERY: usize = 50;

impl NetScoreModel {
    pub fn init(dim: usize, params: &NetTrainParams) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("state dimension"));
        }
        let mut r = rng::stream(params.seed, 0);
        let mut widths = vec![dim + TIME_FEATURES];
        widths.extend(&params.hidden);
        widths.push(dim);
        let mlp = Mlp::new(&widths, params.activation, &mut r)?;
        let mut skip = Dense::zeros(dim, dim);
        skip.bias.clear();
        Ok(Self { mlp, skip, dim, data_var: 1.0 })
    }

    /// Initialisation for training on `dataset`: [`Self::init`] with the
    /// output scaling fitted to the data's per-coordinate variance.
    pub fn init_for(dataset: &[Vec<f64>], params: &NetTrainParams) -> Result<Self> {
        let first = dataset.first().ok_or(Error::Empty("training dataset"))?;
        let mut m = Self::init(first.len(), params)?;
        m.data_var = coordinate_variance(dataset);
        Ok(m)
    }

    /// Data variance used by the output scaling.
    pub fn data_var(&self) -> f64 {
        self.data_var
    }

    fn out_scale(&self, tp: TimePoint) -> f64 {
        1.0 / (1.0 - tp.sigma + tp.sigma * self.data_var).sqrt()
    }

    fn input(&self, x: &[f64], tp: TimePoint) -> Vec<f64> {
        let mut inp = Vec::with_capacity(self.dim + TIME_FEATURES);
        inp.extend_from_slice(x);
        inp.extend_from_slice(&time_features(tp));
        inp
    }

    fn skip_apply(&self, x: &[f64]) -> Vec<f64> {
        self.skip.weight.chunks_exact(self.dim).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    }

    /// `g(x, t)`, before the time-dependent output scaling.
    fn raw_output(&self, x: &[f64], tp: TimePoint) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        check_finite(x, tp.t, "score input")?;
        let mut e = self.mlp.forward(&self.input(x, tp));
        for (ei, si) in e.iter_mut().zip(self.skip_apply(x)) {
            *ei += si;
        }
        Ok(e)
    }

    /// Predicted noise `eps_hat(x, t)`.
    pub fn predict_noise(&self, x: &[f64], tp: TimePoint) -> Result<Vec<f64>> {
        let c = (1.0 - tp.sigma).max(0.0).sqrt() * self.out_scale(tp);
        Ok(self.raw_output(x, tp)?.into_iter().map(|e| c * e).collect())
    }

    /// Mean squared noise-prediction error, averaged per coordinate.
    fn denoise_loss(&self, x0: &[f64], tp: TimePoint, noise: &[f64], sched: &NoiseSchedule) -> Result<f64> {
        let xt = sched.forward_diffuse(x0, tp.t, noise)?;
        let e = self.predict_noise(&xt, tp)?;
        Ok(e.iter().zip(noise).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / self.dim as f64)
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::vector(vec![NET_FORMAT_VERSION, NET_KIND, self.dim as f64, self.data_var])];
        out.extend(self.mlp.to_tensors());
        out.push(Tensor { dims: vec![self.dim, self.dim], data: self.skip.weight.clone() });
        out
    }

    pub fn from_tensors(ts: Vec<Tensor>) -> Result<Self> {
        let mut it = ts.into_iter();
        let head = it.next().ok_or_else(|| Error::Format("empty model file".into()))?;
        if head.data.len() != 4 || head.data[0] != NET_FORMAT_VERSION || head.data[1] != NET_KIND {
            return Err(Error::Format("not a version-1 score network".into()));
        }
        let dim = head.data[2] as usize;
        let data_var = head.data[3];
        if !(data_var.is_finite() && data_var > 0.0) {
            return Err(Error::Format(format!("bad data variance {data_var}")));
        }
        let mlp = Mlp::from_tensors(&mut it)?;
        let sk = it.next().ok_or_else(|| Error::Format("missing skip weights".into()))?;
        if sk.dims != [dim, dim] || mlp.input_dim() != dim + TIME_FEATURES || mlp.output_dim() != dim {
            return Err(Error::Format("score network shape mismatch".into()));
        }
        let skip = Dense { n_in: dim, n_out: dim, weight: sk.data, bias: Vec::new() };
        Ok(Self { mlp, skip, dim, data_var })
    }
}

const NET_FORMAT_VERSION: f64 = 1.0;
const NET_KIND: f64 = 2.0;
const GMM_KIND: f64 = 1.0;

impl ScoreModel for NetScoreModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: &[f64], tp: TimePoint) -> Result<Vec<f64>> {
        let c = -self.out_scale(tp);
        Ok(self.raw_output(x, tp)?.into_iter().map(|e| c * e).collect())
    }

    fn score_vjp(&self, x: &[f64], tp: TimePoint, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.score_and_vjp(x, tp, v)?.1)
    }

    fn score_and_vjp(&self, x: &[f64], tp: TimePoint, v: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, v.len())?;
        check_finite(x, tp.t, "score input")?;
        check_finite(v, tp.t, "vjp cotangent")?;
        let c = -self.out_scale(tp);
        let trace = self.mlp.forward_trace(&self.input(x, tp));
        let skip = self.skip_apply(x);
        let score = trace.output.iter().zip(&skip).map(|(a, b)| c * (a + b)).collect();
        let g: Vec<f64> = v.iter().map(|vi| c * vi).collect();
        let mut back = self.mlp.backward(&trace, &g, None);
        back.truncate(self.dim);
        for (bi, si) in back.iter_mut().zip(self.skip.backward_input(&g)) {
            *bi += si;
        }
        Ok((score, back))
    }
}

/// Mean over coordinates of the per-coordinate variance, floored so the
/// output scaling stays bounded for degenerate data.
fn coordinate_variance(data: &[Vec<f64>]) -> f64 {
    let n = data.len() as f64;
    let dim = data[0].len();
    let mut total = 0.0;
    for i in 0..dim {
        let mean = data.iter().map(|x| x[i]).sum::<f64>() / n;
        total += data.iter().map(|x| (x[i] - mean).powi(2)).sum::<f64>() / n;
    }
    (total / dim as f64).max(DATA_VAR_FLOOR)
}

const DATA_VAR_FLOOR: f64 = 1e-4;

/// Splits off the trailing `holdout` fraction (at least one sample when the
/// dataset has two or more).
fn split_holdout(data: &[Vec<f64>], holdout: f64) -> (&[Vec<f64>], &[Vec<f64>]) {
    if data.len() < 2 {
        return (data, data);
    }
    let h = ((data.len() as f64 * holdout).round() as usize).clamp(1, data.len() - 1);
    data.split_at(data.len() - h)
}

/// Denoising score matching: minimise `|eps_hat(x_t, t) - eps|^2` over
/// random data points, steps and noise draws.
pub fn train_net_score(
    dataset: &[Vec<f64>],
    schedule: &NoiseSchedule,
    params: &NetTrainParams,
) -> Result<(NetScoreModel, TrainReport)> {
    let dim = dataset.first().ok_or(Error::Empty("training dataset"))?.len();
    for x in dataset {
        check_dim(dim, x.len())?;
        check_finite(x, 0, "training sample")?;
    }
    if params.batch == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = NetScoreModel::init_for(dataset, params)?;
    let (train, held) = split_holdout(dataset, params.holdout);

    // fixed evaluation draws so initial/final losses are comparable
    let eval_draws = eval_draws(held, schedule, params.seed);
    let holdout_loss = |m: &NetScoreModel| -> Result<f64> {
        let mut acc = 0.0;
        for (i, t, noise) in &eval_draws {
            acc += m.denoise_loss(&held[*i], schedule.at(*t), noise, schedule)?;
        }
        Ok(acc / eval_draws.len() as f64)
    };
    let initial = holdout_loss(&model)?;

    let n_params = model.mlp.param_count() + dim * dim;
    let mut opt = Adam::new(n_params, params.lr);
    let mut r = rng::stream(params.seed, 1);
    let mut curve = Vec::new();
    let mut window = 0.0;
    let steps = schedule.steps();
    for step in 0..params.steps {
        let mut grads = model.mlp.zero_grads();
        let mut skip_grad = vec![0.0; dim * dim];
        let mut loss = 0.0;
        for _ in 0..params.batch {
            let x0 = train.choose(&mut r).expect("non-empty");
            let t = rand::Rng::random_range(&mut r, 1..=steps);
            let tp = schedule.at(t);
            let noise = rng::normal_vec(&mut r, dim);
            let xt = schedule.forward_diffuse(x0, t, &noise)?;
            let trace = model.mlp.forward_trace(&model.input(&xt, tp));
            let skip = model.skip_apply(&xt);
            let c = (1.0 - tp.sigma).max(0.0).sqrt() * model.out_scale(tp);
            let resid: Vec<f64> =
                trace.output.iter().zip(&skip).zip(&noise).map(|((a, b), e)| c * (a + b) - e).collect();
            loss += resid.iter().map(|v| v * v).sum::<f64>() / dim as f64;
            let g: Vec<f64> = resid.iter().map(|v| 2.0 * c * v / dim as f64).collect();
            model.mlp.backward(&trace, &g, Some(&mut grads));
            for (row, gi) in skip_grad.chunks_exact_mut(dim).zip(&g) {
                for (s, xi) in row.iter_mut().zip(&xt) {
                    *s += gi * xi;
                }
            }
        }
        let inv = 1.0 / params.batch as f64;
        loss *= inv;
        if !loss.is_finite() || loss > 1e8 {
            return Err(Error::Diverged { step, loss });
        }
        grads.scale(inv);
        skip_grad.iter_mut().for_each(|v| *v *= inv);
        let NetScoreModel { mlp, skip, .. } = &mut model;
        opt.update(mlp.params_mut().chain(skip.weight.iter_mut()), grads.values().chain(skip_grad.iter()));
        window += loss;
        if (step + 1) % LOSS_LOG_EVERY == 0 {
            curve.push(window / LOSS_LOG_EVERY as f64);
            window = 0.0;
        }
    }
    let final_loss = holdout_loss(&model)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged { step: params.steps, loss: final_loss });
    }
    Ok((model, TrainReport { initial_holdout_loss: initial, final_holdout_loss: final_loss, curve }))
}

fn eval_draws(held: &[Vec<f64>], schedule: &NoiseSchedule, seed: u64) -> Vec<(usize, usize, Vec<f64>)> {
    let mut r = rng::stream(seed, 2);
    let dim = held[0].len();
    (0..256)
        .map(|k| {
            let t = 1 + (k * 7919) % schedule.steps();
            (k % held.len(), t, rng::normal_vec(&mut r, dim))
        })
        .collect()
}

/// Either kind of score model, for file IO and configuration.
#[derive(Debug, Clone)]
pub enum AnyScoreModel {
    Gmm(GmmScoreModel),
    Net(NetScoreModel),
}

impl AnyScoreModel {
    pub fn as_model(&self) -> &dyn ScoreModel {
        match self {
            Self::Gmm(m) => m,
            Self::Net(m) => m,
        }
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        match self {
            Self::Net(m) => m.to_tensors(),
            Self::Gmm(m) => {
                let k = m.components.len();
                let mut out = vec![Tensor::vector(vec![NET_FORMAT_VERSION, GMM_KIND, m.dim as f64])];
                out.push(Tensor::vector(m.components.iter().map(|c| c.weight).collect()));
                let means = m.components.iter().flat_map(|c| c.mean.iter().copied()).collect();
                let vars = m.components.iter().flat_map(|c| c.var.iter().copied()).collect();
                out.push(Tensor { dims: vec![k, m.dim], data: means });
                out.push(Tensor { dims: vec![k, m.dim], data: vars });
                out
            }
        }
    }

    pub fn from_tensors(ts: Vec<Tensor>) -> Result<Self> {
        let head = ts.first().ok_or_else(|| Error::Format("empty model file".into()))?;
        if head.data.len() < 3 || head.data[0] != NET_FORMAT_VERSION {
            return Err(Error::Format("unsupported model header".into()));
        }
        if head.data[1] == NET_KIND {
            return NetScoreModel::from_tensors(ts).map(Self::Net);
        }
        if head.data[1] != GMM_KIND || head.data.len() != 3 || ts.len() != 4 {
            return Err(Error::Format("unknown model kind".into()));
        }
        let means = ts[2].rows()?;
        let vars = ts[3].rows()?;
        if means.len() != ts[1].data.len() || vars.len() != means.len() {
            return Err(Error::Format("mixture table shapes disagree".into()));
        }
        let comps = ts[1]
            .data
            .iter()
            .zip(means)
            .zip(vars)
            .map(|((&weight, mean), var)| GmmComponent { weight, mean, var })
            .collect();
        GmmScoreModel::new(comps).map(Self::Gmm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ScheduleKind;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(100, ScheduleKind::LinearBeta).unwrap()
    }

    fn tp(sigma: f64) -> TimePoint {
        TimePoint { t: 10, steps: 100, sigma }
    }

    fn mixture3() -> GmmScoreModel {
        GmmScoreModel::new(vec![
            GmmComponent { weight: 0.5, mean: vec![1.0, -0.5, 0.3], var: vec![0.2, 0.1, 0.5] },
            GmmComponent { weight: 0.3, mean: vec![-1.2, 0.4, 0.0], var: vec![0.3, 0.3, 0.05] },
            GmmComponent { weight: 0.2, mean: vec![0.0, 1.5, -1.0], var: vec![0.1, 0.4, 0.2] },
        ])
        .unwrap()
    }

    // Brute-force log density, written without the model's internals.
    fn oracle_log_density(m: &GmmScoreModel, x: &[f64], sigma: f64) -> f64 {
        let mut p = 0.0;
        for c in m.components() {
            let mut dens = c.weight;
            for i in 0..x.len() {
                let var = sigma * c.var[i] + 1.0 - sigma;
                let mu = sigma.sqrt() * c.mean[i];
                dens *= (-(x[i] - mu).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt();
            }
            p += dens;
        }
        p.ln()
    }

    #[test]
    fn standard_normal_score_is_minus_x() {
        let m = GmmScoreModel::gaussian(vec![0.0; 3], vec![1.0; 3]).unwrap();
        let x = [0.5, -2.0, 1.25];
        let s = m.score(&x, tp(1.0)).unwrap();
        assert_eq!(s, vec![-0.5, 2.0, -1.25]);
        let v = [1.0, 2.0, -3.0];
        assert_eq!(m.score_vjp(&x, tp(1.0), &v).unwrap(), vec![-1.0, -2.0, 3.0]);
    }

    #[test]
    fn unit_variance_closed_form() {
        let mu = vec![0.7, -1.1];
        let m = GmmScoreModel::gaussian(mu.clone(), vec![1.0; 2]).unwrap();
        let x = [0.2, 0.3];
        for sigma in [0.9, 0.5, 0.01] {
            let s = m.score(&x, tp(sigma)).unwrap();
            for i in 0..2 {
                let expect = -(x[i] - sigma.sqrt() * mu[i]);
                assert!((s[i] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mixture_score_matches_density_gradient() {
        let m = mixture3();
        let mut r = rng::stream(11, 0);
        for sigma in [0.95, 0.6, 0.2, 0.02] {
            for _ in 0..10 {
                let x = rng::normal_vec(&mut r, 3);
                let s = m.score(&x, tp(sigma)).unwrap();
                for i in 0..3 {
                    let h = f64::EPSILON.cbrt() * (1.0 + x[i].abs());
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += h;
                    xm[i] -= h;
                    let fd = (oracle_log_density(&m, &xp, sigma) - oracle_log_density(&m, &xm, sigma)) / (2.0 * h);
                    assert!((s[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{} vs {fd}", s[i]);
                }
                let lp = m.log_density(&x, tp(sigma)).unwrap();
                assert!((lp - oracle_log_density(&m, &x, sigma)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn mixture_vjp_matches_finite_difference_jacobian() {
        let m = mixture3();
        let mut r = rng::stream(12, 0);
        for sigma in [0.8, 0.3] {
            let x = rng::normal_vec(&mut r, 3);
            let h = 1e-5;
            // row j of J by central differences of the score
            let mut jac = vec![vec![0.0; 3]; 3];
            for j in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let sp = m.score(&xp, tp(sigma)).unwrap();
                let sm = m.score(&xm, tp(sigma)).unwrap();
                for i in 0..3 {
                    jac[i][j] = (sp[i] - sm[i]) / (2.0 * h);
                }
            }
            for k in 0..3 {
                let mut e = vec![0.0; 3];
                e[k] = 1.0;
                let row = m.score_vjp(&x, tp(sigma), &e).unwrap();
                for j in 0..3 {
                    let fd = jac[k][j];
                    assert!((row[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "{} vs {fd}", row[j]);
                }
            }
        }
    }

    #[test]
    fn vjp_of_zero_is_zero() {
        let m = mixture3();
        let out = m.score_vjp(&[0.1, 0.2, 0.3], tp(0.5), &[0.0; 3]).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_mixtures_and_inputs() {
        let c = |w: f64, v: f64| GmmComponent { weight: w, mean: vec![0.0], var: vec![v] };
        assert!(GmmScoreModel::new(vec![c(0.5, 1.0), c(0.4, 1.0)]).is_err());
        assert!(GmmScoreModel::new(vec![c(1.0, 0.0)]).is_err());
        assert!(GmmScoreModel::new(vec![]).is_err());
        let m = GmmScoreModel::new(vec![c(1.0, 1.0)]).unwrap();
        assert!(m.score(&[f64::NAN], tp(0.5)).is_err());
        assert!(m.score(&[0.0, 1.0], tp(0.5)).is_err());
    }

    #[test]
    fn net_vjp_matches_finite_differences() {
        let model = NetScoreModel::init(4, &NetTrainParams::default()).unwrap();
        // give the skip some weight so that path is exercised too
        let mut model = model;
        for (i, w) in model.skip.weight.iter_mut().enumerate() {
            *w = ((i * 37 % 11) as f64 - 5.0) * 0.05;
        }
        let s = sched();
        let mut r = rng::stream(13, 0);
        let x = rng::normal_vec(&mut r, 4);
        let v = rng::normal_vec(&mut r, 4);
        let tpt = s.at(37);
        let an = model.score_vjp(&x, tpt, &v).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp: f64 = model.score(&xp, tpt).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum();
            let fm: f64 = model.score(&xm, tpt).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((an[j] - fd).abs() <= 1e-6 * fd.abs().max(1.0), "{} vs {fd}", an[j]);
        }
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let data: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.1, 0.0]).collect();
        let p = NetTrainParams { steps: 0, ..Default::default() };
        let (m, rep) = train_net_score(&data, &sched(), &p).unwrap();
        assert_eq!(m, NetScoreModel::init_for(&data, &p).unwrap());
        assert_eq!(rep.initial_holdout_loss, rep.final_holdout_loss);
    }

    #[test]
    fn training_errors() {
        assert!(matches!(train_net_score(&[], &sched(), &NetTrainParams::default()), Err(Error::Empty(_))));
        let ragged = vec![vec![0.0, 1.0], vec![0.0]];
        assert!(train_net_score(&ragged, &sched(), &NetTrainParams::default()).is_err());
        let data = vec![vec![1.0, 2.0]; 8];
        let p = NetTrainParams { lr: 1e9, steps: 200, ..Default::default() };
        match train_net_score(&data, &sched(), &p) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }

    #[test]
    fn model_files_roundtrip() {
        let g = AnyScoreModel::Gmm(mixture3());
        let back = AnyScoreModel::from_tensors(g.to_tensors()).unwrap();
        assert!(matches!(back, AnyScoreModel::Gmm(ref m) if *m == mixture3()));
        let n = NetScoreModel::init(3, &NetTrainParams::default()).unwrap();
        let back = AnyScoreModel::from_tensors(AnyScoreModel::Net(n.clone()).to_tensors()).unwrap();
        assert!(matches!(back, AnyScoreModel::Net(ref m) if *m == n));
    }
}
