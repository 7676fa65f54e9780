//! Small dense networks with a hand-written reverse pass.
//!
//! Used by the trainable score model and by the toy classifier. Weights are
//! stored row-major (`out x in`).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// `x * sigmoid(x)`; smooth, so input gradients exist everywhere.
    Silu,
}

impl Activation {
    fn code(self) -> f64 {
        match self {
            Self::Tanh => 0.0,
            Self::Silu => 1.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        match c as i64 {
            0 => Ok(Self::Tanh),
            1 => Ok(Self::Silu),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Silu => z / (1.0 + (-z).exp()),
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Self::Tanh => {
                let h = z.tanh();
                1.0 - h * h
            }
            Self::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { n_in, n_out, weight: vec![0.0; n_in * n_out], bias: vec![0.0; n_out] }
    }

    /// Scaled normal init, `std = gain / sqrt(n_in)`.
    pub fn init<R: Rng + ?Sized>(n_in: usize, n_out: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (n_in as f64).sqrt();
        let weight = (0..n_in * n_out).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { n_in, n_out, weight, bias: vec![0.0; n_out] }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weight
            .chunks_exact(self.n_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    /// `W^T g`
    pub fn backward_input(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_in];
        for (row, gi) in self.weight.chunks_exact(self.n_in).zip(g) {
            if *gi == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += gi * w;
            }
        }
        out
    }

    fn accumulate(&self, x: &[f64], g: &[f64], grad: &mut Dense) {
        for ((grow, gi), gb) in grad.weight.chunks_exact_mut(self.n_in).zip(g).zip(grad.bias.iter_mut()) {
            *gb += gi;
            for (gw, xi) in grow.iter_mut().zip(x) {
                *gw += gi * xi;
            }
        }
    }
}

/// Feed-forward network: dense layers with a shared hidden activation and
/// a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Pre-activations and activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// `widths` lists every layer size including input and output.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("bad layer widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(w[0], w[1], if i == last { 0.5 } else { 1.0 }, rng))
            .collect();
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().n_out
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(|l| l.n_out)).collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if i != last {
                h.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
        }
        h
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h);
            inputs.push(h);
            if i == last {
                h = z;
            } else {
                h = z.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(z);
            }
        }
        Trace { inputs, pre, output: h }
    }

    /// Reverse pass: returns the input gradient for upstream gradient
    /// `g_out`, and accumulates parameter gradients into `grads` if given.
    pub fn backward(&self, trace: &Trace, g_out: &[f64], mut grads: Option<&mut MlpGrads>) -> Vec<f64> {
        let mut g = g_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < self.layers.len() - 1 {
                for (gi, z) in g.iter_mut().zip(&trace.pre[i]) {
                    *gi *= self.activation.derivative(*z);
                }
            }
            if let Some(gr) = grads.as_deref_mut() {
                self.layers[i].accumulate(&trace.inputs[i], &g, &mut gr.layers[i]);
            }
            g = self.layers[i].backward_input(&g);
        }
        g
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads { layers: self.layers.iter().map(|l| Dense::zeros(l.n_in, l.n_out)).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        let mut meta = vec![self.activation.code(), self.layers.len() as f64];
        meta.extend(self.widths().iter().map(|&w| w as f64));
        let mut out = vec![Tensor::vector(meta)];
        for l in &self.layers {
            out.push(Tensor { dims: vec![l.n_out, l.n_in], data: l.weight.clone() });
            out.push(Tensor::vector(l.bias.clone()));
        }
        out
    }

    /// Inverse of [`Mlp::to_tensors`]; consumes records from the front.
    pub fn from_tensors(ts: &mut impl Iterator<Item = Tensor>) -> Result<Self> {
        let meta = ts.next().ok_or_else(|| Error::Format("missing mlp header".into()))?;
        if meta.data.len() < 2 {
            return Err(Error::Format("short mlp header".into()));
        }
        let activation = Activation::from_code(meta.data[0])?;
        let n_layers = meta.data[1] as usize;
        if meta.data.len() != n_layers + 3 {
            return Err(Error::Format("mlp header length mismatch".into()));
        }
        let widths: Vec<usize> = meta.data[2..].iter().map(|&w| w as usize).collect();
        let mut layers = Vec::with_capacity(n_layers);
        for w in widths.windows(2) {
            let wt = ts.next().ok_or_else(|| Error::Format("missing weight".into()))?;
            let bt = ts.next().ok_or_else(|| Error::Format("missing bias".into()))?;
            if wt.dims != [w[1], w[0]] || bt.dims != [w[1]] {
                return Err(Error::Format("layer shape mismatch".into()));
            }
            layers.push(Dense { n_in: w[0], n_out: w[1], weight: wt.data, bias: bt.data });
        }
        Ok(Self { layers, activation })
    }
}

/// Parameter gradients with the same layout as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl MlpGrads {
    pub fn scale(&mut self, c: f64) {
        for l in &mut self.layers {
            l.weight.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v *= c);
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

/// Plain Adam over a flat parameter view.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }

    /// Updates `params` in place; `params` and `grads` are visited in the
    /// same order every call.
    pub fn update<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

impl Mlp {
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }
}

impl MlpGrads {
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}
