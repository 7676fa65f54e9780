//! Toy classifier, L-infinity gradient attacks and accuracy metrics.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::nn::{Activation, Adam, Mlp};
use crate::operators::{sign_vec, GridShape};
use crate::par::{self, Execution};
use crate::rng;
use crate::tensor_io::Tensor;

/// Softmax classifier over flat states.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    net: Mlp,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierParams {
    fn default() -> Self {
        Self { hidden: vec![32], epochs: 30, batch: 32, lr: 1e-2, seed: 0 }
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl Classifier {
    pub fn init(input_dim: usize, classes: usize, params: &ClassifierParams) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument("classifier needs at least two classes".into()));
        }
        let mut widths = vec![input_dim];
        widths.extend(&params.hidden);
        widths.push(classes);
        let net = Mlp::new(&widths, Activation::Tanh, &mut rng::stream(params.seed, 0))?;
        Ok(Self { net })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        if net.output_dim() < 2 {
            return Err(Error::InvalidArgument("classifier needs at least two classes".into()));
        }
        Ok(Self { net })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn mlp_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        Ok(self.net.forward(x))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let l = self.logits(x)?;
        // first maximum wins ties
        Ok(l.iter().enumerate().fold(0, |best, (i, v)| if *v > l[best] { i } else { best }))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label < self.classes() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("label {label} out of range for {} classes", self.classes())))
        }
    }

    pub fn loss(&self, x: &[f64], label: usize) -> Result<f64> {
        self.check_label(label)?;
        Ok(-log_softmax(&self.logits(x)?)[label])
    }

    /// Gradient of `-sum_k q_k log p_k(x)` with respect to `x` for a target
    /// distribution `q`.
    pub fn soft_loss_grad(&self, x: &[f64], target: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.classes(), target.len())?;
        let trace = self.net.forward_trace(x);
        let lp = log_softmax(&trace.output);
        let total: f64 = target.iter().sum();
        let g: Vec<f64> = lp.iter().zip(target).map(|(l, q)| total * l.exp() - q).collect();
        Ok(self.net.backward(&trace, &g, None))
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut out = vec![Tensor::vector(vec![1.0, 3.0])];
        out.extend(self.net.to_tensors());
        out
    }

    pub fn from_tensors(ts: Vec<Tensor>) -> Result<Self> {
        let mut it = ts.into_iter();
        match it.next() {
            Some(h) if h.data == [1.0, 3.0] => Self::from_mlp(Mlp::from_tensors(&mut it)?),
            _ => Err(Error::Format("not a version-1 classifier file".into())),
        }
    }
}

/// Gradient of the cross-entropy loss at `(x, label)` with respect to `x`.
pub fn classifier_grad(clf: &Classifier, x: &[f64], label: usize) -> Result<Vec<f64>> {
    clf.check_label(label)?;
    let mut q = vec![0.0; clf.classes()];
    q[label] = 1.0;
    clf.soft_loss_grad(x, &q)
}

/// Labelled samples, optionally with an image layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub shape: Option<GridShape>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.xs.first().map_or(0, Vec::len)
    }

    pub fn classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self { xs: self.xs[..n].to_vec(), labels: self.labels[..n].to_vec(), shape: self.shape }
    }

    pub fn to_tensors(&self) -> Result<Vec<Tensor>> {
        Ok(vec![
            Tensor::from_rows(&self.xs)?,
            Tensor::vector(self.labels.iter().map(|&l| l as f64).collect()),
        ])
    }

    pub fn from_tensors(ts: &[Tensor], shape: Option<GridShape>) -> Result<Self> {
        if ts.len() < 2 {
            return Err(Error::Format("dataset needs samples and labels".into()));
        }
        let xs = ts[0].rows()?;
        let labels: Vec<usize> = ts[1].data.iter().map(|&l| l as usize).collect();
        check_dim(xs.len(), labels.len())?;
        Ok(Self { xs, labels, shape })
    }
}

/// Mini-batch Adam on cross-entropy.
pub fn train_classifier(data: &LabeledSet, params: &ClassifierParams) -> Result<Classifier> {
    if data.is_empty() {
        return Err(Error::Empty("classifier training set"));
    }
    check_dim(data.xs.len(), data.labels.len())?;
    let dim = data.dim();
    for x in &data.xs {
        check_dim(dim, x.len())?;
        check_finite(x, 0, "training sample")?;
    }
    let mut seen = data.labels.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::InvalidArgument("training data has a single class".into()));
    }
    let mut clf = Classifier::init(dim, data.classes(), params)?;
    let mut opt = Adam::new(clf.net.param_count(), params.lr);
    let mut r = rng::stream(params.seed, 1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = params.batch.max(1);
    for _ in 0..params.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(batch) {
            let mut grads = clf.net.zero_grads();
            for &i in chunk {
                let trace = clf.net.forward_trace(&data.xs[i]);
                let lp = log_softmax(&trace.output);
                let mut g: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                g[data.labels[i]] -= 1.0;
                clf.net.backward(&trace, &g, Some(&mut grads));
            }
            grads.scale(1.0 / chunk.len() as f64);
            opt.update(clf.net.params_mut(), grads.values());
        }
    }
    Ok(clf)
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(clf: &Classifier, samples: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    check_dim(samples.len(), labels.len())?;
    if samples.is_empty() {
        return Err(Error::Empty("accuracy inputs"));
    }
    let mut correct = 0usize;
    for (x, &y) in samples.iter().zip(labels) {
        if clf.predict(x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// L-infinity budget.
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
}

impl AttackSpec {
    /// FGSM: one step of size `epsilon`.
    pub fn fgsm(epsilon: f64) -> Self {
        Self { epsilon, steps: 1, step_size: epsilon }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("attack needs at least one step".into()));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(Error::InvalidArgument("step size must be finite and >= 0".into()));
        }
        if self.step_size * (self.steps as f64) < self.epsilon {
            return Err(Error::InvalidArgument("budget unreachable: step_size * steps < epsilon".into()));
        }
        Ok(())
    }
}

/// Projected sign-gradient ascent on the cross-entropy, projected onto the
/// L-infinity ball around `x_ori` after every step.
pub fn pgd_attack(clf: &Classifier, x_ori: &[f64], label: usize, spec: &AttackSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    check_dim(clf.input_dim(), x_ori.len())?;
    let eps = spec.epsilon;
    let mut x = x_ori.to_vec();
    for _ in 0..spec.steps {
        let g = sign_vec(&classifier_grad(clf, &x, label)?);
        for ((xi, gi), oi) in x.iter_mut().zip(&g).zip(x_ori) {
            *xi = (*xi + spec.step_size * gi).clamp(oi - eps, oi + eps);
        }
    }
    Ok(x)
}

/// Attacks every sample in `data`.
pub fn attack_set(clf: &Classifier, data: &LabeledSet, spec: &AttackSpec, exec: Execution) -> Result<LabeledSet> {
    let xs = par::try_map_indexed(exec, data.len(), |i| pgd_attack(clf, &data.xs[i], data.labels[i], spec))?;
    Ok(LabeledSet { xs, labels: data.labels.clone(), shape: data.shape })
}

const IDX_UBYTE: u8 = 0x08;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an unsigned-byte IDX file (big-endian header).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Format("bad IDX magic".into()));
    }
    if bytes[2] != IDX_UBYTE {
        return Err(Error::Format(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("truncated IDX header".into()));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() != header + n {
        return Err(Error::Format(format!("IDX payload has {} bytes, expected {n}", bytes.len() - header)));
    }
    Ok(IdxArray { dims, data: bytes[header..].to_vec() })
}

/// Images scaled to `[0, 1]`, from a `0x00000803` file.
pub fn read_idx_images(path: &Path) -> Result<(Vec<Vec<f64>>, GridShape)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || u32::from_be_bytes(bytes[..4].try_into().unwrap()) != IDX_IMAGES_MAGIC {
        return Err(Error::Format("expected IDX image magic 0x00000803".into()));
    }
    let arr = parse_idx(&bytes)?;
    let (h, w) = (arr.dims[1], arr.dims[2]);
    let shape = GridShape::new(h, w, 1)?;
    let xs = if h * w == 0 {
        vec![Vec::new(); arr.dims[0]]
    } else {
        arr.data.chunks(h * w).map(|c| c.iter().map(|&b| f64::from(b) / 255.0).collect()).collect()
    };
    Ok((xs, shape))
}

/// Labels from a `0x00000801` file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || u32::from_be_bytes(bytes[..4].try_into().unwrap()) != IDX_LABELS_MAGIC {
        return Err(Error::Format("expected IDX label magic 0x00000801".into()));
    }
    Ok(parse_idx(&bytes)?.data.into_iter().map(usize::from).collect())
}
