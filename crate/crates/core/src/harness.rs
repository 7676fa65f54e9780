//! Experiment orchestration: configuration, the prepared "lab" (data,
//! classifier, score model, attacked set), the mimic-deviation metric, the
//! ablation grid, the sign-equality suite, timing and the L2 leak diagnostic.
//!
//! Seeding: a single root seed drives everything. Fixed sub-roots are
//! `derive_seed(root, k)` with k = 1 (train data), 2 (eval data),
//! 3 (classifier), 4 (score net), 5 (sign-equality draws). Purification
//! replicate `r` uses `derive_seed(root, REPLICATE_KEY + r)`, and sample `i`
//! within it `derive_seed(that, i)`. The adversarial run and its clean twin
//! always share that per-sample seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::Serialize;

use crate::attack::{self, AttackSpec, Classifier, ClassifierParams, LabeledSet};
use crate::data::{self, BarImages, EVAL_SUBSET};
use crate::error::{check_dim, Error, Result};
use crate::guidance::{self, FactorRule, GuidanceConfig, GuidanceInterval, Norm, PurifyOptions, PurifyResult};
use crate::nn::Activation;
use crate::operators::{self, CubicKernel, GridShape, Operator};
use crate::par::{self, Execution};
use crate::rng::{self, derive_seed};
use crate::sampler::{self, JacobianMode};
use crate::schedule::{NoiseSchedule, ScheduleKind};
use crate::score::{self, AnyScoreModel, NetTrainParams, ScoreModel, TrainReport};

pub const REPLICATE_KEY: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Bars,
    Blobs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreKind {
    Analytic,
    Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    /// Bicubic x4 for image data, identity otherwise.
    Auto,
    Identity,
    Bicubic,
    Lift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub kind: DataKind,
    pub bars: BarImages,
    pub separation: f64,
    pub train: usize,
    pub eval: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSpec {
    pub long: bool,
    pub short: bool,
    pub norm: Norm,
    pub operator: OperatorKind,
    pub kernel: CubicKernel,
    pub sampling: bool,
    pub start: Option<usize>,
    pub end: Option<usize>,
    pub factor: FactorRule,
    pub jacobian: JacobianMode,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LemmaSpec {
    pub trials: usize,
    pub dim: usize,
    pub xi: f64,
}

/// Everything an experiment needs, parsed from flat `section.key = value`
/// text. Missing keys keep their defaults.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub score: ScoreKind,
    pub net: NetTrainParams,
    pub classifier: ClassifierParams,
    pub attack: AttackSpec,
    pub guidance: GuidanceSpec,
    pub purify_count: usize,
    pub lemma: LemmaSpec,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSpec {
                kind: DataKind::Bars,
                bars: BarImages::default(),
                separation: 6.0,
                train: 2000,
                eval: EVAL_SUBSET,
            },
            steps: 100,
            schedule: ScheduleKind::LinearBeta,
            score: ScoreKind::Analytic,
            net: NetTrainParams::default(),
            classifier: ClassifierParams::default(),
            attack: AttackSpec { epsilon: 0.2, steps: 20, step_size: 0.025 },
            guidance: GuidanceSpec {
                long: true,
                short: true,
                norm: Norm::L1,
                operator: OperatorKind::Auto,
                kernel: CubicKernel::Lagrange,
                sampling: true,
                start: None,
                end: None,
                factor: FactorRule::InverseSigmaSquared,
                jacobian: JacobianMode::ExactVjp,
                scale: 2e-3,
            },
            purify_count: 16,
            lemma: LemmaSpec { trials: 100_000, dim: 64, xi: 0.1 },
            seeds: (0..20).collect(),
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{v}`"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(key, s.trim())).collect()
}

/// `a..b` (half open) or a comma list.
fn parse_seeds(key: &str, v: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let (a, b): (u64, u64) = (parse(key, a.trim())?, parse(key, b.trim())?);
        return Ok((a..b).collect());
    }
    parse_list(key, v)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `section.key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !k.contains('.') {
                return Err(Error::Config(format!("line {}: key `{k}` has no section", lineno + 1)));
            }
            if seen.insert(k.to_string(), lineno).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key `{k}`", lineno + 1)));
            }
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse_str(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.guidance;
        match key {
            "experiment.seeds" => self.seeds = parse_seeds(key, v)?,
            "experiment.out" => self.out = Some(PathBuf::from(v)),
            "data.kind" => {
                self.data.kind = match v {
                    "bars" => DataKind::Bars,
                    "blobs" => DataKind::Blobs,
                    _ => return Err(Error::Config(format!("{key}: unknown dataset `{v}`"))),
                }
            }
            "data.size" => self.data.bars.size = parse(key, v)?,
            "data.positions" => self.data.bars.positions = parse_list(key, v)?,
            "data.low" => self.data.bars.low = parse(key, v)?,
            "data.high" => self.data.bars.high = parse(key, v)?,
            "data.noise" => self.data.bars.noise = parse(key, v)?,
            "data.separation" => self.data.separation = parse(key, v)?,
            "data.train" => self.data.train = parse(key, v)?,
            "data.eval" => self.data.eval = parse(key, v)?,
            "schedule.steps" => self.steps = parse(key, v)?,
            "schedule.kind" => self.schedule = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "score.kind" => {
                self.score = match v {
                    "analytic" => ScoreKind::Analytic,
                    "net" => ScoreKind::Net,
                    _ => return Err(Error::Config(format!("{key}: unknown score model `{v}`"))),
                }
            }
            "score.hidden" => self.net.hidden = parse_list(key, v)?,
            "score.activation" => {
                self.net.activation = match v {
                    "tanh" => Activation::Tanh,
                    "silu" => Activation::Silu,
                    _ => return Err(Error::Config(format!("{key}: unknown activation `{v}`"))),
                }
            }
            "score.steps" => self.net.steps = parse(key, v)?,
            "score.batch" => self.net.batch = parse(key, v)?,
            "score.lr" => self.net.lr = parse(key, v)?,
            "score.holdout" => self.net.holdout = parse(key, v)?,
            "classifier.hidden" => self.classifier.hidden = parse_list(key, v)?,
            "classifier.epochs" => self.classifier.epochs = parse(key, v)?,
            "classifier.batch" => self.classifier.batch = parse(key, v)?,
            "classifier.lr" => self.classifier.lr = parse(key, v)?,
            "attack.epsilon" => self.attack.epsilon = parse(key, v)?,
            "attack.steps" => self.attack.steps = parse(key, v)?,
            "attack.step_size" => self.attack.step_size = parse(key, v)?,
            "guidance.long" => g.long = parse_bool(key, v)?,
            "guidance.short" => g.short = parse_bool(key, v)?,
            "guidance.norm" => g.norm = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "guidance.operator" => {
                g.operator = match v {
                    "auto" => OperatorKind::Auto,
                    "identity" => OperatorKind::Identity,
                    "bicubic" => OperatorKind::Bicubic,
                    "lift" => OperatorKind::Lift,
                    _ => return Err(Error::Config(format!("{key}: unknown operator `{v}`"))),
                }
            }
            "guidance.kernel" => g.kernel = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "guidance.sampling" => g.sampling = parse_bool(key, v)?,
            "guidance.start" => g.start = Some(parse(key, v)?),
            "guidance.end" => g.end = Some(parse(key, v)?),
            "guidance.factor" => g.factor = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "guidance.jacobian" => {
                g.jacobian = match v {
                    "exact" => JacobianMode::ExactVjp,
                    "free" => JacobianMode::JacobianFree,
                    _ => return Err(Error::Config(format!("{key}: expected `exact` or `free`"))),
                }
            }
            "guidance.scale" => g.scale = parse(key, v)?,
            "purify.count" => self.purify_count = parse(key, v)?,
            "lemma.trials" => self.lemma.trials = parse(key, v)?,
            "lemma.dim" => self.lemma.dim = parse(key, v)?,
            "lemma.xi" => self.lemma.xi = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds is empty".into()));
        }
        if self.steps < 2 {
            return Err(Error::Config("schedule.steps must be >= 2".into()));
        }
        if self.data.train == 0 || self.data.eval == 0 {
            return Err(Error::Config("data.train and data.eval must be positive".into()));
        }
        if self.data.kind == DataKind::Bars {
            self.data.bars.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.attack.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.lemma.trials == 0 || self.lemma.dim == 0 || !(self.lemma.xi >= 0.0) {
            return Err(Error::Config("lemma needs trials >= 1, dim >= 1, xi >= 0".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let g = &self.guidance;
        let d = &self.data;
        let mut lines = vec![
            format!("experiment.seeds = {}", join(&self.seeds)),
            format!(
                "data.kind = {}",
                match d.kind {
                    DataKind::Bars => "bars",
                    DataKind::Blobs => "blobs",
                }
            ),
            format!("data.size = {}", d.bars.size),
            format!("data.positions = {}", join(&d.bars.positions)),
            format!("data.low = {}", d.bars.low),
            format!("data.high = {}", d.bars.high),
            format!("data.noise = {}", d.bars.noise),
            format!("data.separation = {}", d.separation),
            format!("data.train = {}", d.train),
            format!("data.eval = {}", d.eval),
            format!("schedule.steps = {}", self.steps),
            format!("schedule.kind = {}", self.schedule),
            format!(
                "score.kind = {}",
                match self.score {
                    ScoreKind::Analytic => "analytic",
                    ScoreKind::Net => "net",
                }
            ),
            format!("score.hidden = {}", join(&self.net.hidden)),
            format!(
                "score.activation = {}",
                match self.net.activation {
                    Activation::Tanh => "tanh",
                    Activation::Silu => "silu",
                }
            ),
            format!("score.steps = {}", self.net.steps),
            format!("score.batch = {}", self.net.batch),
            format!("score.lr = {}", self.net.lr),
            format!("score.holdout = {}", self.net.holdout),
            format!("classifier.hidden = {}", join(&self.classifier.hidden)),
            format!("classifier.epochs = {}", self.classifier.epochs),
            format!("classifier.batch = {}", self.classifier.batch),
            format!("classifier.lr = {}", self.classifier.lr),
            format!("attack.epsilon = {}", self.attack.epsilon),
            format!("attack.steps = {}", self.attack.steps),
            format!("attack.step_size = {}", self.attack.step_size),
            format!("guidance.long = {}", g.long),
            format!("guidance.short = {}", g.short),
            format!("guidance.norm = {}", g.norm.to_string().to_ascii_lowercase()),
            format!(
                "guidance.operator = {}",
                match g.operator {
                    OperatorKind::Auto => "auto",
                    OperatorKind::Identity => "identity",
                    OperatorKind::Bicubic => "bicubic",
                    OperatorKind::Lift => "lift",
                }
            ),
            format!("guidance.kernel = {}", g.kernel),
            format!("guidance.sampling = {}", g.sampling),
        ];
        if let Some(s) = g.start {
            lines.push(format!("guidance.start = {s}"));
        }
        if let Some(e) = g.end {
            lines.push(format!("guidance.end = {e}"));
        }
        lines.extend([
            format!("guidance.factor = {}", g.factor),
            format!(
                "guidance.jacobian = {}",
                match g.jacobian {
                    JacobianMode::ExactVjp => "exact",
                    JacobianMode::JacobianFree => "free",
                }
            ),
            format!("guidance.scale = {}", g.scale),
            format!("purify.count = {}", self.purify_count),
            format!("lemma.trials = {}", self.lemma.trials),
            format!("lemma.dim = {}", self.lemma.dim),
            format!("lemma.xi = {}", self.lemma.xi),
        ]);
        if let Some(o) = &self.out {
            lines.push(format!("experiment.out = {}", o.display()));
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn grid_shape(&self) -> Option<GridShape> {
        match self.data.kind {
            DataKind::Bars => Some(self.data.bars.shape()),
            DataKind::Blobs => None,
        }
    }

    pub fn make_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.schedule)
    }

    pub fn operator(&self) -> Result<Operator> {
        let shape = self.grid_shape();
        match (self.guidance.operator, shape) {
            (OperatorKind::Identity, _) | (OperatorKind::Auto, None) => Ok(Operator::Identity),
            (OperatorKind::Auto | OperatorKind::Bicubic, Some(shape)) => {
                Ok(Operator::Bicubic4 { shape, kernel: self.guidance.kernel })
            }
            (OperatorKind::Bicubic, None) => Err(Error::Config("bicubic operator needs image data".into())),
            (OperatorKind::Lift, _) => Ok(Operator::NonlinearLift),
        }
    }

    pub fn guidance_config(&self) -> Result<GuidanceConfig> {
        let g = &self.guidance;
        let interval = if g.sampling {
            let mid = GuidanceInterval::middle_phase(self.steps);
            GuidanceInterval { start: g.start.unwrap_or(mid.start), end: g.end.unwrap_or(mid.end) }
        } else {
            GuidanceInterval::full(self.steps)
        };
        Ok(GuidanceConfig {
            use_long: g.long,
            use_short: g.short,
            norm: g.norm,
            operator: self.operator()?,
            interval,
            factor: g.factor,
            jacobian: g.jacobian,
            scale: g.scale,
        })
    }

    pub fn make_datasets(&self, root: u64) -> Result<(LabeledSet, LabeledSet)> {
        let d = &self.data;
        Ok(match d.kind {
            DataKind::Bars => {
                (d.bars.sample(d.train, derive_seed(root, 1))?, d.bars.sample(d.eval, derive_seed(root, 2))?)
            }
            DataKind::Blobs => (
                data::two_blobs(d.train, d.separation, derive_seed(root, 1)),
                data::two_blobs(d.eval, d.separation, derive_seed(root, 2)),
            ),
        })
    }

    pub fn train_classifier(&self, train: &LabeledSet, root: u64) -> Result<Classifier> {
        let p = ClassifierParams { seed: derive_seed(root, 3), ..self.classifier.clone() };
        attack::train_classifier(train, &p)
    }

    /// The analytic model is the exact generating mixture; the net model is
    /// trained on the training split. The report is `None` for analytic.
    pub fn score_model(
        &self,
        train: &LabeledSet,
        schedule: &NoiseSchedule,
        root: u64,
    ) -> Result<(AnyScoreModel, Option<TrainReport>)> {
        match self.score {
            ScoreKind::Analytic => Ok((
                AnyScoreModel::Gmm(match self.data.kind {
                    DataKind::Bars => self.data.bars.mixture()?,
                    DataKind::Blobs => data::blobs_mixture(self.data.separation),
                }),
                None,
            )),
            ScoreKind::Net => {
                let p = NetTrainParams { seed: derive_seed(root, 4), ..self.net.clone() };
                let (m, report) = score::train_net_score(&train.xs, schedule, &p)?;
                Ok((AnyScoreModel::Net(m), Some(report)))
            }
        }
    }
}

/// Prepared experiment: schedule, score model, classifier and the clean and
/// attacked evaluation sets.
pub struct Lab {
    pub config: ExperimentConfig,
    pub root: u64,
    pub schedule: NoiseSchedule,
    pub model: AnyScoreModel,
    pub score_report: Option<TrainReport>,
    pub classifier: Classifier,
    pub train: LabeledSet,
    pub eval: LabeledSet,
    pub adversarial: LabeledSet,
}

impl Lab {
    pub fn prepare(config: &ExperimentConfig, root: u64, exec: Execution) -> Result<Self> {
        config.validate()?;
        let schedule = config.make_schedule()?;
        let (train, eval) = config.make_datasets(root)?;
        let classifier = config.train_classifier(&train, root)?;
        let (model, score_report) = config.score_model(&train, &schedule, root)?;
        let adversarial = attack::attack_set(&classifier, &eval, &config.attack, exec)?;
        Ok(Self {
            config: config.clone(),
            root,
            schedule,
            model,
            score_report,
            classifier,
            train,
            eval,
            adversarial,
        })
    }

    pub fn model(&self) -> &dyn ScoreModel {
        self.model.as_model()
    }

    /// Per-sample purification seeds of replicate `rep`.
    pub fn sample_seeds(&self, rep: u64) -> Vec<u64> {
        replicate_seeds(self.root, rep, self.eval.len())
    }

    pub fn clean_accuracy(&self) -> Result<f64> {
        attack::accuracy(&self.classifier, &self.eval.xs, &self.eval.labels)
    }

    pub fn attacked_accuracy(&self) -> Result<f64> {
        attack::accuracy(&self.classifier, &self.adversarial.xs, &self.adversarial.labels)
    }

    /// Largest `||x_adv - x_ori||_inf` over the attacked set.
    pub fn max_perturbation(&self) -> f64 {
        self.eval
            .xs
            .iter()
            .zip(&self.adversarial.xs)
            .map(|(o, a)| operators::max_abs(&operators::diff(a, o).expect("same dims")))
            .fold(0.0, f64::max)
    }
}

pub fn replicate_seeds(root: u64, rep: u64, n: usize) -> Vec<u64> {
    let r = derive_seed(root, REPLICATE_KEY + rep);
    (0..n as u64).map(|i| derive_seed(r, i)).collect()
}

/// Two purifications sharing every noise draw, one guided by `x_adv`, one
/// by `x_ori`.
#[derive(Debug, Clone)]
pub struct PairedRun {
    pub adversarial: PurifyResult,
    pub clean: PurifyResult,
    pub deviation: f64,
}

pub fn purify_pair(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_ori: &[f64],
    x_adv: &[f64],
    config: &GuidanceConfig,
    seed: u64,
) -> Result<PairedRun> {
    check_dim(x_ori.len(), x_adv.len())?;
    let opts = PurifyOptions { record_trajectory: true, clean_reference: Some(x_ori) };
    let adversarial = guidance::purify_with(model, schedule, x_adv, config, seed, &opts)?;
    let clean = guidance::purify_with(model, schedule, x_ori, config, seed, &opts)?;
    let n = x_ori.len() as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    if config.enabled() {
        for (a, c) in adversarial.trajectory.states.iter().zip(&clean.trajectory.states) {
            if config.interval.contains(a.t) {
                total += operators::l1_dist(&a.x_hat, &c.x_hat)? / n;
                count += 1;
            }
        }
    }
    let deviation = if count == 0 { 0.0 } else { total / count as f64 };
    Ok(PairedRun { adversarial, clean, deviation })
}

/// Mean over guided steps of `||x_hat_adv - x_hat_clean||_1 / n` for two
/// runs with identical noise draws.
pub fn mimic_deviation(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_ori: &[f64],
    x_adv: &[f64],
    config: &GuidanceConfig,
    seed: u64,
) -> Result<f64> {
    Ok(purify_pair(model, schedule, x_ori, x_adv, config, seed)?.deviation)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; 0 for fewer than two values.
    pub fn of(xs: &[f64]) -> Self {
        if xs.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub standard: f64,
    pub robust: f64,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub long: bool,
    pub short: bool,
    pub norm: Norm,
    pub sampling: bool,
    pub guided_steps: usize,
    pub standard: MeanStd,
    pub robust: MeanStd,
    pub deviation: MeanStd,
    pub per_seed: Vec<SeedMetrics>,
    pub failures: Vec<String>,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// The unguided baseline followed by the seven guided configurations, in
/// table order. Every row shares `base`'s operator, factor and scale.
pub fn ablation_grid(base: &GuidanceConfig, steps: usize) -> Vec<(String, GuidanceConfig)> {
    let full = GuidanceInterval::full(steps);
    let mid = if base.interval == full { GuidanceInterval::middle_phase(steps) } else { base.interval };
    let row = |long: bool, short: bool, norm: Norm, sampling: bool| GuidanceConfig {
        use_long: long,
        use_short: short,
        norm,
        interval: if sampling { mid } else { full },
        ..base.clone()
    };
    vec![
        ("unguided".into(), GuidanceConfig { use_long: false, use_short: false, ..row(false, false, Norm::L1, true) }),
        ("gl-l2".into(), row(true, false, Norm::L2, false)),
        ("gs-l2".into(), row(false, true, Norm::L2, false)),
        ("gl-l1".into(), row(true, false, Norm::L1, false)),
        ("gs-l1".into(), row(false, true, Norm::L1, false)),
        ("both-l2".into(), row(true, true, Norm::L2, false)),
        ("both-l1".into(), row(true, true, Norm::L1, false)),
        ("both-l1-sampling".into(), row(true, true, Norm::L1, true)),
    ]
}

/// One replicate of one configuration over the whole evaluation set.
pub fn evaluate_replicate(lab: &Lab, config: &GuidanceConfig, rep: u64, exec: Execution) -> Result<SeedMetrics> {
    let seeds = lab.sample_seeds(rep);
    let runs = par::try_map_indexed(exec, lab.eval.len(), |i| {
        let p = purify_pair(lab.model(), &lab.schedule, &lab.eval.xs[i], &lab.adversarial.xs[i], config, seeds[i])?;
        Ok::<_, Error>((p.clean.x0, p.adversarial.x0, p.deviation))
    })?;
    let clean: Vec<Vec<f64>> = runs.iter().map(|r| r.0.clone()).collect();
    let adv: Vec<Vec<f64>> = runs.iter().map(|r| r.1.clone()).collect();
    Ok(SeedMetrics {
        seed: rep,
        standard: attack::accuracy(&lab.classifier, &clean, &lab.eval.labels)?,
        robust: attack::accuracy(&lab.classifier, &adv, &lab.eval.labels)?,
        deviation: runs.iter().map(|r| r.2).sum::<f64>() / runs.len() as f64,
    })
}

/// Runs every row over every replicate seed. A failing replicate is
/// recorded on its row and the run continues.
pub fn run_ablation(lab: &Lab, exec: Execution) -> Result<Vec<AblationRow>> {
    let base = lab.config.guidance_config()?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_grid(&base, lab.schedule.steps()) {
        let clock = std::time::Instant::now();
        let mut per_seed = Vec::new();
        let mut failures = Vec::new();
        for &rep in &lab.config.seeds {
            match evaluate_replicate(lab, &cfg, rep, exec) {
                Ok(m) => per_seed.push(m),
                Err(e) => failures.push(format!("seed {rep}: {e}")),
            }
        }
        let col = |f: fn(&SeedMetrics) -> f64| MeanStd::of(&per_seed.iter().map(f).collect::<Vec<_>>());
        rows.push(AblationRow {
            long: cfg.use_long,
            short: cfg.use_short,
            norm: cfg.norm,
            sampling: cfg.interval != GuidanceInterval::full(lab.schedule.steps()),
            guided_steps: if cfg.enabled() { cfg.interval.guided_steps(lab.schedule.steps()) } else { 0 },
            standard: col(|m| m.standard),
            robust: col(|m| m.robust),
            deviation: col(|m| m.deviation),
            per_seed,
            failures,
            wall_time: clock.elapsed(),
            name,
        });
    }
    Ok(rows)
}

pub const ABLATION_COLUMNS: &str = "row,g_long,g_short,norm,sampling,guided_steps,seeds_ok,standard_mean,standard_std,robust_mean,robust_std,deviation_mean,deviation_std,failures";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_COLUMNS}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.name,
            r.long,
            r.short,
            r.norm,
            r.sampling,
            r.guided_steps,
            r.per_seed.len(),
            r.standard.mean,
            r.standard.std,
            r.robust.mean,
            r.robust.std,
            r.deviation.mean,
            r.deviation.std,
            r.failures.len()
        );
    }
    s
}

pub const ABLATION_SEED_COLUMNS: &str = "row,seed,standard,robust,deviation";

pub fn ablation_seed_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_SEED_COLUMNS}\n");
    for r in rows {
        for m in &r.per_seed {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, m.seed, m.standard, m.robust, m.deviation);
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counterexample {
    pub xi: f64,
    pub gap: f64,
    pub phi: f64,
    pub sign_against_adv: f64,
    pub sign_against_ori: f64,
    pub differs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Lemma1Report {
    pub trials: usize,
    pub dim: usize,
    pub xi: f64,
    pub long_range_equal: usize,
    pub long_range_rate: f64,
    pub counterexample: Counterexample,
    pub short_range_trials: usize,
    pub short_range_disagreements: usize,
    pub short_range_disagreement_rate: f64,
}

/// Case (1): random `(x_t, x_ori, phi)` with `||phi||_inf <= xi` and every
/// `|x_t - x_ori| > xi`; counts trials whose L1 gradients against `x_adv`
/// and `x_ori` are identical. Case (2): a hand-built sign flip, and the
/// disagreement rate when the gaps are drawn from `(-2 xi, 2 xi)`.
pub fn verify_lemma1(trials: usize, dim: usize, xi: f64, seed: u64) -> Result<Lemma1Report> {
    if trials == 0 || dim == 0 {
        return Err(Error::InvalidArgument("lemma check needs trials >= 1 and dim >= 1".into()));
    }
    if !(xi.is_finite() && xi >= 0.0) {
        return Err(Error::InvalidArgument(format!("xi = {xi} must be finite and >= 0")));
    }
    let mut r = rng::stream(seed, 0);
    let grads = |x_t: &[f64], x_ori: &[f64], phi: &[f64]| -> Result<bool> {
        let x_adv: Vec<f64> = x_ori.iter().zip(phi).map(|(o, p)| o + p).collect();
        Ok(Norm::L1.grad(x_t, &x_adv)? == Norm::L1.grad(x_t, x_ori)?)
    };
    let mut equal = 0;
    for _ in 0..trials {
        let x_ori = rng::normal_vec(&mut r, dim);
        let u = rng::uniform_vec(&mut r, 3 * dim, 0.0, 1.0);
        let phi: Vec<f64> = (0..dim).map(|i| xi * (2.0 * u[i] - 1.0)).collect();
        // gap magnitude in (xi + 1e-9, xi + 1 + 1e-9)
        let x_t: Vec<f64> = (0..dim)
            .map(|i| {
                let mag = xi + 1e-9 + u[dim + i];
                x_ori[i] + if u[2 * dim + i] < 0.5 { -mag } else { mag }
            })
            .collect();
        if grads(&x_t, &x_ori, &phi)? {
            equal += 1;
        }
    }
    let gap = 0.5 * xi;
    let phi = 0.9 * xi;
    let sign_adv = operators::sign(gap - phi);
    let sign_ori = operators::sign(gap);
    let counterexample = Counterexample {
        xi,
        gap,
        phi,
        sign_against_adv: sign_adv,
        sign_against_ori: sign_ori,
        differs: sign_adv != sign_ori,
    };
    let mut disagreements = 0;
    for _ in 0..trials {
        let x_ori = rng::normal_vec(&mut r, dim);
        let u = rng::uniform_vec(&mut r, 2 * dim, -1.0, 1.0);
        let phi: Vec<f64> = u[..dim].iter().map(|v| xi * v).collect();
        let x_t: Vec<f64> = x_ori.iter().zip(&u[dim..]).map(|(o, v)| o + 2.0 * xi * v).collect();
        if !grads(&x_t, &x_ori, &phi)? {
            disagreements += 1;
        }
    }
    Ok(Lemma1Report {
        trials,
        dim,
        xi,
        long_range_equal: equal,
        long_range_rate: equal as f64 / trials as f64,
        counterexample,
        short_range_trials: trials,
        short_range_disagreements: disagreements,
        short_range_disagreement_rate: disagreements as f64 / trials as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub steps: usize,
    pub runs: usize,
    pub gated_guided_steps: usize,
    pub full_guided_steps: usize,
    pub disabled_guided_steps: usize,
    pub guided_step_ratio: f64,
    #[serde(skip)]
    pub gated_guidance: Duration,
    #[serde(skip)]
    pub full_guidance: Duration,
    #[serde(skip)]
    pub gated_total: Duration,
    #[serde(skip)]
    pub full_total: Duration,
}

impl TimingReport {
    /// Fractional reduction of guidance-phase wall time from gating.
    pub fn guidance_time_reduction(&self) -> f64 {
        1.0 - self.gated_guidance.as_secs_f64() / self.full_guidance.as_secs_f64()
    }
}

/// Purifies every target with `config` (gated) and again over the full
/// interval with the same seeds, sequentially, accumulating guidance-phase
/// and total wall time. Step counts are per run.
pub fn timing_report(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    targets: &[Vec<f64>],
    config: &GuidanceConfig,
    seeds: &[u64],
) -> Result<TimingReport> {
    check_dim(targets.len(), seeds.len())?;
    if targets.is_empty() {
        return Err(Error::Empty("timing targets"));
    }
    let steps = schedule.steps();
    let full = GuidanceConfig { interval: GuidanceInterval::full(steps), ..config.clone() };
    let disabled = GuidanceConfig { use_long: false, use_short: false, ..config.clone() };
    let opts = PurifyOptions::default();
    let mut rep = TimingReport {
        steps,
        runs: targets.len(),
        gated_guided_steps: 0,
        full_guided_steps: 0,
        disabled_guided_steps: 0,
        guided_step_ratio: 0.0,
        gated_guidance: Duration::ZERO,
        full_guidance: Duration::ZERO,
        gated_total: Duration::ZERO,
        full_total: Duration::ZERO,
    };
    for (y, &seed) in targets.iter().zip(seeds) {
        let g = guidance::purify_with(model, schedule, y, config, seed, &opts)?;
        let f = guidance::purify_with(model, schedule, y, &full, seed, &opts)?;
        let d = guidance::purify_with(model, schedule, y, &disabled, seed, &opts)?;
        rep.gated_guided_steps = g.guidance_evaluations;
        rep.full_guided_steps = f.guidance_evaluations;
        rep.disabled_guided_steps = d.guidance_evaluations;
        rep.gated_guidance += g.timing.guidance;
        rep.full_guidance += f.timing.guidance;
        rep.gated_total += g.timing.guidance + g.timing.reverse;
        rep.full_total += f.timing.guidance + f.timing.reverse;
    }
    rep.guided_step_ratio = rep.gated_guided_steps as f64 / steps as f64;
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakStep {
    pub t: usize,
    pub factor: f64,
    /// `||g_L2(x_adv) - g_L2(x_ori)||_1` with the exact pullback.
    pub l2_exact: f64,
    /// Same with the identity pullback.
    pub l2_free: f64,
    /// Largest relative deviation of the identity-pullback difference from
    /// `2 R_t scale phi`.
    pub l2_free_closed_form_error: f64,
    /// `||g_L1(x_adv) - g_L1(x_ori)||_1` with the exact pullback.
    pub l1_exact: f64,
    pub min_abs_to_clean: f64,
    pub phi_max: f64,
}

/// Along one unguided reverse trajectory, evaluates the long-range term
/// against `x_ori + phi` and against `x_ori` at every step of `config`'s
/// interval, for both norms.
pub fn diagnose_l2_leak(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    x_ori: &[f64],
    phi: &[f64],
    config: &GuidanceConfig,
    seed: u64,
) -> Result<Vec<LeakStep>> {
    check_dim(x_ori.len(), phi.len())?;
    let x_adv: Vec<f64> = x_ori.iter().zip(phi).map(|(o, p)| o + p).collect();
    let traj = sampler::sample_unconditional(model, schedule, seed)?;
    let phi_max = operators::max_abs(phi);
    let mut out = Vec::new();
    for st in traj.states.iter().filter(|s| s.t >= 1 && config.interval.contains(s.t)) {
        let t = st.t;
        let with = |norm: Norm, jacobian: JacobianMode, y: &[f64]| -> Result<Vec<f64>> {
            let c = GuidanceConfig { use_long: true, use_short: false, norm, jacobian, ..config.clone() };
            guidance::long_range_guidance(model, schedule, &st.x, t, y, &c)
        };
        let diff_l1 = |a: Vec<f64>, b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
        let r = guidance::guided_factor(schedule, t, config.factor)?;
        let free_adv = with(Norm::L2, JacobianMode::JacobianFree, &x_adv)?;
        let free_ori = with(Norm::L2, JacobianMode::JacobianFree, x_ori)?;
        let mut err: f64 = 0.0;
        for i in 0..phi.len() {
            let expect = 2.0 * r * config.scale * phi[i];
            let got = free_adv[i] - free_ori[i];
            err = err.max((got - expect).abs() / expect.abs().max(1.0));
        }
        out.push(LeakStep {
            t,
            factor: r,
            l2_exact: diff_l1(with(Norm::L2, JacobianMode::ExactVjp, &x_adv)?, with(Norm::L2, JacobianMode::ExactVjp, x_ori)?),
            l2_free: diff_l1(free_adv, free_ori),
            l2_free_closed_form_error: err,
            l1_exact: diff_l1(with(Norm::L1, JacobianMode::ExactVjp, &x_adv)?, with(Norm::L1, JacobianMode::ExactVjp, x_ori)?),
            min_abs_to_clean: operators::min_abs(&operators::diff(&st.x_hat, x_ori)?)?,
            phi_max,
        });
    }
    Ok(out)
}

pub const LEAK_COLUMNS: &str = "t,factor,l2_exact,l2_free,l2_free_closed_form_error,l1_exact,min_abs_to_clean,phi_max";

pub fn leak_csv(steps: &[LeakStep]) -> String {
    let mut s = format!("{LEAK_COLUMNS}\n");
    for r in steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.t, r.factor, r.l2_exact, r.l2_free, r.l2_free_closed_form_error, r.l1_exact, r.min_abs_to_clean, r.phi_max
        );
    }
    s
}

/// Writes `contents` to `dir/name`, creating `dir` if needed.
pub fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_output(dir, name, &s)
}
