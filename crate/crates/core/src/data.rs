//! Procedurally generated toy datasets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attack::LabeledSet;
use crate::error::{Error, Result};
use crate::operators::GridShape;
use crate::rng;
use crate::score::{GmmComponent, GmmScoreModel};

/// Size of the fixed evaluation subset.
pub const EVAL_SUBSET: usize = 512;

/// Two unit-variance 2-D Gaussian blobs centred at `(-sep/2, 0)` and
/// `(sep/2, 0)`, labels alternating.
pub fn two_blobs(n: usize, separation: f64, seed: u64) -> LabeledSet {
    let mut r = rng::stream(seed, 0);
    let mut xs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let z = rng::normal_vec(&mut r, 2);
        let c = if label == 0 { -0.5 * separation } else { 0.5 * separation };
        xs.push(vec![c + z[0], z[1]]);
        labels.push(label);
    }
    LabeledSet { xs, labels, shape: None }
}

/// The generating distribution of [`two_blobs`].
pub fn blobs_mixture(separation: f64) -> GmmScoreModel {
    let h = 0.5 * separation;
    GmmScoreModel::new(vec![
        GmmComponent { weight: 0.5, mean: vec![-h, 0.0], var: vec![1.0, 1.0] },
        GmmComponent { weight: 0.5, mean: vec![h, 0.0], var: vec![1.0, 1.0] },
    ])
    .expect("valid mixture")
}

/// A fixed, well-separated 3-component mixture in 2-D.
pub fn three_component_mixture() -> GmmScoreModel {
    GmmScoreModel::new(vec![
        GmmComponent { weight: 0.5, mean: vec![-2.0, 0.0], var: vec![0.25, 0.5] },
        GmmComponent { weight: 0.3, mean: vec![1.5, 1.5], var: vec![0.3, 0.2] },
        GmmComponent { weight: 0.2, mean: vec![1.0, -2.0], var: vec![0.4, 0.4] },
    ])
    .expect("valid mixture")
}

/// Draws `n` samples from a mixture.
pub fn sample_mixture(model: &GmmScoreModel, n: usize, seed: u64) -> Vec<Vec<f64>> {
    sample_mixture_labeled(model, n, seed).0
}

fn sample_mixture_labeled(model: &GmmScoreModel, n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::stream(seed, 0);
    let comps = model.components();
    let mut xs = Vec::with_capacity(n);
    let mut ks = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut k = comps.len() - 1;
        for (i, c) in comps.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                k = i;
                break;
            }
        }
        let c = &comps[k];
        let z = rng::normal_vec(&mut r, c.mean.len());
        xs.push(c.mean.iter().zip(&c.var).zip(&z).map(|((m, v), z)| m + v.sqrt() * z).collect());
        ks.push(k);
    }
    (xs, ks)
}

/// Two-class bar-orientation images: class 0 has a horizontal bar, class 1
/// a vertical bar, each at one of `positions` with equal probability.
/// Pixels are the template plus i.i.d. Gaussian noise, so the generating
/// distribution is an exact diagonal mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BarImages {
    pub size: usize,
    pub positions: Vec<usize>,
    pub low: f64,
    pub high: f64,
    pub noise: f64,
}

impl Default for BarImages {
    fn default() -> Self {
        Self { size: 8, positions: vec![2, 3, 4, 5], low: -0.5, high: 0.5, noise: 0.2 }
    }
}

impl BarImages {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return Err(Error::InvalidArgument("bar images need size >= 2".into()));
        }
        if self.positions.is_empty() || self.positions.iter().any(|&p| p >= self.size) {
            return Err(Error::InvalidArgument("bar positions must be inside the image".into()));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::InvalidArgument("pixel noise must be positive".into()));
        }
        Ok(())
    }

    pub fn shape(&self) -> GridShape {
        GridShape::new(self.size, self.size, 1).expect("size checked")
    }

    pub fn dim(&self) -> usize {
        self.size * self.size
    }

    pub fn template(&self, class: usize, pos: usize) -> Vec<f64> {
        let n = self.size;
        (0..n * n)
            .map(|i| {
                let (row, col) = (i / n, i % n);
                let on = if class == 0 { row == pos } else { col == pos };
                if on {
                    self.high
                } else {
                    self.low
                }
            })
            .collect()
    }

    /// Component order is class-major: `k = class * positions.len() + p`.
    pub fn mixture(&self) -> Result<GmmScoreModel> {
        self.validate()?;
        let k = 2 * self.positions.len();
        let w = 1.0 / k as f64;
        let var = vec![self.noise * self.noise; self.dim()];
        let comps = (0..2)
            .flat_map(|c| self.positions.iter().map(move |&p| (c, p)))
            .map(|(c, p)| GmmComponent { weight: w, mean: self.template(c, p), var: var.clone() })
            .collect();
        GmmScoreModel::new(comps)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<LabeledSet> {
        let model = self.mixture()?;
        let (xs, ks) = sample_mixture_labeled(&model, n, seed);
        let per = self.positions.len();
        Ok(LabeledSet { xs, labels: ks.into_iter().map(|k| k / per).collect(), shape: Some(self.shape()) })
    }
}
