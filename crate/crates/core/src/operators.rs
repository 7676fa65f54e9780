//! Elementwise primitives, distances and the lifting operators used by the
//! short-range guidance term.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// `+1` for positive, `-1` for negative, `0` for zero (and NaN).
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn sign_vec(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| sign(v)).collect()
}

/// Sign with a dead zone: `|v| < tol` maps to 0.
pub fn sign_deadzone(x: &[f64], tol: f64) -> Vec<f64> {
    x.iter().map(|&v| if v.abs() < tol { 0.0 } else { sign(v) }).collect()
}

/// `min_i |x_i|`.
pub fn min_abs(x: &[f64]) -> Result<f64> {
    x.iter().map(|v| v.abs()).reduce(f64::min).ok_or(Error::Empty("min_abs input"))
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn diff(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_dim(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

pub fn l1_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum())
}

pub fn l2_sq_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// `grad_a |a - b|_1 = sign(a - b)`.
pub fn l1_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    Ok(sign_vec(&diff(a, b)?))
}

/// `grad_a |a - b|_2^2 = 2 (a - b)`.
pub fn l2_grad(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    Ok(diff(a, b)?.into_iter().map(|d| 2.0 * d).collect())
}

/// Image layout of a flat state, stored channel-major (`c, y, x`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl GridShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::InvalidArgument("grid dimensions must be positive".into()));
        }
        Ok(Self { height, width, channels })
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn upsampled(&self) -> Self {
        Self { height: UPSCALE * self.height, width: UPSCALE * self.width, channels: self.channels }
    }
}

pub const UPSCALE: usize = 4;

/// Four-tap interpolation kernel for the x4 upsampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CubicKernel {
    /// Piecewise cubic Lagrange through the four nearest samples. Exact on
    /// cubic polynomials.
    #[default]
    Lagrange,
    /// Keys cubic convolution with `a = -0.5`. Exact on quadratics only.
    CatmullRom,
}

impl FromStr for CubicKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lagrange" => Ok(Self::Lagrange),
            "catmull-rom" => Ok(Self::CatmullRom),
            other => Err(Error::InvalidArgument(format!("unknown cubic kernel `{other}`"))),
        }
    }
}

impl fmt::Display for CubicKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lagrange => "lagrange",
            Self::CatmullRom => "catmull-rom",
        })
    }
}

impl CubicKernel {
    /// Weights for the samples at offsets -1, 0, 1, 2 around fraction `f`.
    pub fn weights(self, f: f64) -> [f64; 4] {
        match self {
            Self::Lagrange => [
                -f * (f - 1.0) * (f - 2.0) / 6.0,
                (f + 1.0) * (f - 1.0) * (f - 2.0) / 2.0,
                -(f + 1.0) * f * (f - 2.0) / 2.0,
                (f + 1.0) * f * (f - 1.0) / 6.0,
            ],
            Self::CatmullRom => {
                const A: f64 = -0.5;
                let near = |d: f64| ((A + 2.0) * d - (A + 3.0)) * d * d + 1.0;
                let far = |d: f64| ((A * d - 5.0 * A) * d + 8.0 * A) * d - 4.0 * A;
                [far(1.0 + f), near(f), near(1.0 - f), far(2.0 - f)]
            }
        }
    }
}

/// Source coordinate of upsampled index `o` (pixel-centre alignment).
pub fn source_coordinate(o: usize) -> f64 {
    (o as f64 + 0.5) / UPSCALE as f64 - 0.5
}

#[derive(Debug, Clone, Copy)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

fn axis_taps(len: usize, kernel: CubicKernel) -> Vec<Taps> {
    let last = len as isize - 1;
    (0..UPSCALE * len)
        .map(|o| {
            let u = source_coordinate(o);
            let base = u.floor();
            let w = kernel.weights(u - base);
            let b = base as isize;
            let idx = [-1isize, 0, 1, 2].map(|k| (b + k).clamp(0, last) as usize);
            Taps { idx, w }
        })
        .collect()
}

fn check_grid(x: &[f64], shape: GridShape) -> Result<()> {
    check_dim(shape.len(), x.len())?;
    if shape.height < 2 || shape.width < 2 {
        return Err(Error::InvalidArgument("bicubic upsampling needs at least 2x2 pixels".into()));
    }
    Ok(())
}

/// Separable x4 bicubic upsampling with clamp-to-edge boundaries.
pub fn bicubic_up4(x: &[f64], shape: GridShape) -> Result<Vec<f64>> {
    bicubic_up4_with(x, shape, CubicKernel::default())
}

pub fn bicubic_up4_with(x: &[f64], shape: GridShape, kernel: CubicKernel) -> Result<Vec<f64>> {
    check_grid(x, shape)?;
    let GridShape { height: h, width: w, channels } = shape;
    let (oh, ow) = (UPSCALE * h, UPSCALE * w);
    let tx = axis_taps(w, kernel);
    let ty = axis_taps(h, kernel);
    let mut out = vec![0.0; channels * oh * ow];
    let mut rows = vec![0.0; h * ow];
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            let src = &plane[y * w..(y + 1) * w];
            let row = &mut rows[y * ow..(y + 1) * ow];
            for (r, tp) in row.iter_mut().zip(&tx) {
                let [i0, i1, i2, i3] = tp.idx;
                *r = tp.w[0] * src[i0] + tp.w[1] * src[i1] + tp.w[2] * src[i2] + tp.w[3] * src[i3];
            }
        }
        let dst = &mut out[c * oh * ow..(c + 1) * oh * ow];
        for (d, tp) in dst.chunks_exact_mut(ow).zip(&ty) {
            let [r0, r1, r2, r3] = tp.idx.map(|i| &rows[i * ow..(i + 1) * ow]);
            for ox in 0..ow {
                d[ox] = tp.w[0] * r0[ox] + tp.w[1] * r1[ox] + tp.w[2] * r2[ox] + tp.w[3] * r3[ox];
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`bicubic_up4`]: `H^T v`.
pub fn bicubic_vjp(v: &[f64], shape: GridShape) -> Result<Vec<f64>> {
    bicubic_vjp_with(v, shape, CubicKernel::default())
}

pub fn bicubic_vjp_with(v: &[f64], shape: GridShape, kernel: CubicKernel) -> Result<Vec<f64>> {
    let up = shape.upsampled();
    check_dim(up.len(), v.len())?;
    if shape.height < 2 || shape.width < 2 {
        return Err(Error::InvalidArgument("bicubic upsampling needs at least 2x2 pixels".into()));
    }
    let GridShape { height: h, width: w, channels } = shape;
    let (oh, ow) = (up.height, up.width);
    let tx = axis_taps(w, kernel);
    let ty = axis_taps(h, kernel);
    let mut out = vec![0.0; shape.len()];
    let mut rows = vec![0.0; h * ow];
    for c in 0..channels {
        rows.iter_mut().for_each(|r| *r = 0.0);
        let src = &v[c * oh * ow..(c + 1) * oh * ow];
        for (s_row, tp) in src.chunks_exact(ow).zip(&ty) {
            for k in 0..4 {
                let (w, r) = (tp.w[k], &mut rows[tp.idx[k] * ow..(tp.idx[k] + 1) * ow]);
                for (a, g) in r.iter_mut().zip(s_row) {
                    *a += w * g;
                }
            }
        }
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for (ox, tp) in tx.iter().enumerate() {
                let g = rows[y * ow + ox];
                for k in 0..4 {
                    dst[y * w + tp.idx[k]] += tp.w[k] * g;
                }
            }
        }
    }
    Ok(out)
}

/// Largest input size for which [`dense_bicubic_matrix`] will materialise.
pub const DENSE_LIMIT: usize = 32 * 32;

/// Row-major dense matrix of the upsampler (debug aid for small grids).
pub fn dense_bicubic_matrix(shape: GridShape, kernel: CubicKernel) -> Result<DenseMatrix> {
    if shape.len() > DENSE_LIMIT {
        return Err(Error::InvalidArgument(format!("grid of {} pixels too large to materialise", shape.len())));
    }
    let n = shape.len();
    let m = shape.upsampled().len();
    let mut data = vec![0.0; m * n];
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = bicubic_up4_with(&e, shape, kernel)?;
        for (i, v) in col.into_iter().enumerate() {
            data[i * n + j] = v;
        }
        e[j] = 0.0;
    }
    Ok(DenseMatrix { rows: m, cols: n, data })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, x.len())?;
        Ok(self.data.chunks_exact(self.cols).map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect())
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (row, vi) in self.data.chunks_exact(self.cols).zip(v) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
        Ok(out)
    }
}

pub const LIFT_KAPPA: f64 = 2.0;
pub const LIFT_LAMBDA: f64 = 0.5;

/// `[x, tanh(kappa x), lambda x^2]`, a smooth injective map into `3n`
/// dimensions whose L1 distances dominate those of the input.
pub fn nonlinear_lift(x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * x.len());
    out.extend_from_slice(x);
    out.extend(x.iter().map(|v| (LIFT_KAPPA * v).tanh()));
    out.extend(x.iter().map(|v| LIFT_LAMBDA * v * v));
    out
}

/// `J_lift(x)^T v`.
pub fn nonlinear_lift_vjp(x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    check_dim(3 * n, v.len())?;
    Ok((0..n)
        .map(|i| {
            let th = (LIFT_KAPPA * x[i]).tanh();
            v[i] + LIFT_KAPPA * (1.0 - th * th) * v[n + i] + 2.0 * LIFT_LAMBDA * x[i] * v[2 * n + i]
        })
        .collect())
}

/// Measurement map `H` applied to both the estimate and the guidance target
/// in the short-range term.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Identity,
    Bicubic4 { shape: GridShape, kernel: CubicKernel },
    NonlinearLift,
    /// Explicit matrix; used to cross-check the matrix-free operators.
    Dense(DenseMatrix),
}

impl Operator {
    pub fn bicubic(shape: GridShape) -> Self {
        Self::Bicubic4 { shape, kernel: CubicKernel::default() }
    }

    pub fn check_input(&self, n: usize) -> Result<()> {
        match self {
            Self::Bicubic4 { shape, .. } => check_dim(shape.len(), n),
            Self::Dense(m) => check_dim(m.cols, n),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Identity => Ok(x.to_vec()),
            Self::Bicubic4 { shape, kernel } => bicubic_up4_with(x, *shape, *kernel),
            Self::NonlinearLift => Ok(nonlinear_lift(x)),
            Self::Dense(m) => m.apply(x),
        }
    }

    /// `J_H(x)^T v`; independent of `x` for the linear operators.
    pub fn vjp(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Identity => {
                check_dim(x.len(), v.len())?;
                Ok(v.to_vec())
            }
            Self::Bicubic4 { shape, kernel } => bicubic_vjp_with(v, *shape, *kernel),
            Self::NonlinearLift => nonlinear_lift_vjp(x, v),
            Self::Dense(m) => m.apply_transpose(v),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn sign_examples() {
        assert_eq!(sign_vec(&[3.2, -0.1]), vec![1.0, -1.0]);
        assert_eq!(sign_vec(&[0.0]), vec![0.0]);
        assert_eq!(sign_deadzone(&[1e-13, -2.0], 1e-12), vec![0.0, -1.0]);
    }

    #[test]
    fn sign_is_l1_subgradient_away_from_zero() {
        let mut r = rng::stream(21, 0);
        let x = rng::normal_vec(&mut r, 200);
        let s = sign_vec(&x);
        let h = 1e-7;
        let l1 = |v: &[f64]| v.iter().map(|a| a.abs()).sum::<f64>();
        for i in (0..x.len()).filter(|&i| x[i].abs() > 1e-3) {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (l1(&xp) - l1(&xm)) / (2.0 * h);
            assert!((fd - s[i]).abs() < 1e-6, "{fd} vs {}", s[i]);
        }
    }

    #[test]
    fn min_abs_examples() {
        assert_eq!(min_abs(&[-3.0, 0.5, 2.0]).unwrap(), 0.5);
        assert_eq!(min_abs(&[-1.5; 4]).unwrap(), 1.5);
        assert!(min_abs(&[]).is_err());
        let mut r = rng::stream(22, 0);
        let x = rng::normal_vec(&mut r, 1000);
        let mut best = f64::INFINITY;
        for v in &x {
            if v.abs() < best {
                best = v.abs();
            }
        }
        assert_eq!(min_abs(&x).unwrap(), best);
    }

    #[test]
    fn distance_gradients() {
        let a = [1.0, -2.0, 0.5];
        assert_eq!(l1_grad(&a, &a).unwrap(), vec![0.0; 3]);
        assert_eq!(l1_grad(&a, &[0.0, -3.0, 0.0]).unwrap(), vec![1.0; 3]);
        assert_eq!(l2_grad(&a, &a).unwrap(), vec![0.0; 3]);
        let phi = [0.01, -0.02, 0.03];
        let b: Vec<f64> = a.iter().zip(&phi).map(|(x, p)| x - p).collect();
        let g = l2_grad(&a, &b).unwrap();
        for i in 0..3 {
            assert!((g[i] - 2.0 * phi[i]).abs() < 1e-15);
        }
        assert!(l1_grad(&a, &[0.0]).is_err());
        assert!(l2_grad(&a, &[0.0]).is_err());
    }

    #[test]
    fn distance_gradients_match_finite_differences() {
        let mut r = rng::stream(23, 0);
        let a = rng::normal_vec(&mut r, 50);
        let b = rng::normal_vec(&mut r, 50);
        let g1 = l1_grad(&a, &b).unwrap();
        let g2 = l2_grad(&a, &b).unwrap();
        for i in 0..50 {
            let h = 1e-6;
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[i] += h;
            am[i] -= h;
            let fd2 = (l2_sq_dist(&ap, &b).unwrap() - l2_sq_dist(&am, &b).unwrap()) / (2.0 * h);
            assert!((g2[i] - fd2).abs() <= 1e-8 * fd2.abs().max(1.0));
            if (a[i] - b[i]).abs() > 1e-3 {
                let fd1 = (l1_dist(&ap, &b).unwrap() - l1_dist(&am, &b).unwrap()) / (2.0 * h);
                assert!((g1[i] - fd1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn kernels_partition_unity() {
        for k in [CubicKernel::Lagrange, CubicKernel::CatmullRom] {
            for f in [0.0, 0.125, 0.375, 0.5, 0.625, 0.875, 0.99] {
                let s: f64 = k.weights(f).iter().sum();
                assert!((s - 1.0).abs() < 1e-15, "{k} {f}");
            }
            assert_eq!(k.weights(0.0), [0.0, 1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn constant_image_stays_constant() {
        let shape = GridShape::new(5, 3, 2).unwrap();
        for k in [CubicKernel::Lagrange, CubicKernel::CatmullRom] {
            let up = bicubic_up4_with(&vec![0.7; shape.len()], shape, k).unwrap();
            assert_eq!(up.len(), 20 * 12 * 2);
            assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-14));
        }
    }

    #[test]
    fn output_dims_and_errors() {
        let shape = GridShape::new(2, 2, 1).unwrap();
        assert_eq!(bicubic_up4(&[1.0, 2.0, 3.0, 4.0], shape).unwrap().len(), 64);
        assert!(bicubic_up4(&[1.0; 3], shape).is_err());
        let thin = GridShape::new(1, 4, 1).unwrap();
        assert!(bicubic_up4(&[1.0; 4], thin).is_err());
        assert!(bicubic_vjp(&[0.0; 10], shape).is_err());
        assert!(GridShape::new(0, 2, 1).is_err());
    }

    // Interior upsample sites whose four taps are all inside the signal.
    fn interior_sites(len: usize) -> impl Iterator<Item = usize> {
        (0..UPSCALE * len).filter(move |&o| {
            let b = source_coordinate(o).floor() as isize;
            b >= 1 && b + 2 < len as isize
        })
    }

    #[test]
    fn catmull_rom_reproduces_quadratics_not_cubics() {
        let len = 12;
        let shape = GridShape::new(2, len, 1).unwrap();
        let eval = |p: &dyn Fn(f64) -> f64| -> f64 {
            let row: Vec<f64> = (0..len).map(|i| p(i as f64)).collect();
            let x = [row.clone(), row].concat();
            let up = bicubic_up4_with(&x, shape, CubicKernel::CatmullRom).unwrap();
            interior_sites(len).map(|o| (up[o] - p(source_coordinate(o))).abs()).fold(0.0, f64::max)
        };
        assert!(eval(&|u| 0.3 * u * u - u + 2.0) < 1e-12);
        assert!(eval(&|u| 0.05 * u * u * u) > 1e-3);
    }

    #[test]
    fn adjoint_identity_and_one_hot_rows() {
        let shape = GridShape::new(8, 8, 1).unwrap();
        let dense = dense_bicubic_matrix(shape, CubicKernel::default()).unwrap();
        let mut r = rng::stream(24, 0);
        let x = rng::normal_vec(&mut r, 64);
        let hx = bicubic_up4(&x, shape).unwrap();
        let dx = dense.apply(&x).unwrap();
        for (a, b) in hx.iter().zip(&dx) {
            assert!((a - b).abs() < 1e-13);
        }
        for k in [0, 17, 500, 1023] {
            let mut e = vec![0.0; 1024];
            e[k] = 1.0;
            let row = bicubic_vjp(&e, shape).unwrap();
            for j in 0..64 {
                assert!((row[j] - dense.data[k * 64 + j]).abs() < 1e-14);
            }
        }
        assert!(bicubic_vjp(&[0.0; 1024], shape).unwrap().iter().all(|v| *v == 0.0));
        let big = GridShape::new(64, 64, 1).unwrap();
        assert!(dense_bicubic_matrix(big, CubicKernel::default()).is_err());
    }

    #[test]
    fn lift_examples() {
        assert_eq!(nonlinear_lift(&[0.0; 4]), vec![0.0; 12]);
        let mut r = rng::stream(25, 0);
        let x = rng::normal_vec(&mut r, 5);
        let v = rng::normal_vec(&mut r, 15);
        let an = nonlinear_lift_vjp(&x, &v).unwrap();
        for j in 0..5 {
            let h = 1e-6;
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let dot = |z: &[f64]| nonlinear_lift(z).iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            let fd = (dot(&xp) - dot(&xm)) / (2.0 * h);
            assert!((an[j] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn lift_never_shrinks_l1_distance() {
        let mut r = rng::stream(26, 0);
        for _ in 0..100_000 {
            let a = rng::normal_vec(&mut r, 3);
            let b = rng::normal_vec(&mut r, 3);
            let base = l1_dist(&a, &b).unwrap();
            let lifted = l1_dist(&nonlinear_lift(&a), &nonlinear_lift(&b)).unwrap();
            assert!(lifted >= base);
        }
    }

    #[test]
    fn operator_dispatch() {
        let shape = GridShape::new(3, 3, 1).unwrap();
        let op = Operator::bicubic(shape);
        assert!(op.check_input(8).is_err());
        let x = vec![0.5; 9];
        assert_eq!(op.apply(&x).unwrap().len(), 144);
        assert_eq!(Operator::Identity.vjp(&x, &x).unwrap(), x);
        assert_eq!(Operator::NonlinearLift.apply(&x).unwrap().len(), 27);
    }
}
