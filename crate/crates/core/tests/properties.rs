use mimicdiff::guidance::Norm;
use mimicdiff::operators::{bicubic_up4, bicubic_vjp, sign, GridShape};
use mimicdiff::rng;
use mimicdiff::schedule::{NoiseSchedule, ScheduleKind};
use mimicdiff::score::{GmmComponent, GmmScoreModel, ScoreModel};
use mimicdiff::tensor_io::{read_tensor, write_tensor, Tensor};
use proptest::prelude::*;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

fn vec_of(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn forward_process_is_affine_in_data_and_noise(
        x1 in vec_of(6), x2 in vec_of(6), n1 in vec_of(6), n2 in vec_of(6),
        a in -2.0f64..2.0, t in 1usize..=100,
    ) {
        let s = NoiseSchedule::new(100, ScheduleKind::LinearBeta).unwrap();
        let mix = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| a * p + (1.0 - a) * q).collect() };
        let lhs = s.forward_diffuse(&mix(&x1, &x2), t, &mix(&n1, &n2)).unwrap();
        let rhs = mix(&s.forward_diffuse(&x1, t, &n1).unwrap(), &s.forward_diffuse(&x2, t, &n2).unwrap());
        for (l, r) in lhs.iter().zip(&rhs) {
            prop_assert!(close(*l, *r, 1e-12));
        }
    }

    #[test]
    fn score_vjp_is_linear(
        x in vec_of(4), v1 in vec_of(4), v2 in vec_of(4), a in -2.0f64..2.0, b in -2.0f64..2.0,
        t in 0usize..=100, seed in 0u64..1000,
    ) {
        let mut r = rng::stream(seed, 0);
        let comps = (0..3)
            .map(|_| GmmComponent { weight: 1.0 / 3.0, mean: rng::normal_vec(&mut r, 4), var: rng::uniform_vec(&mut r, 4, 0.2, 2.0) })
            .collect();
        let m = GmmScoreModel::new(comps).unwrap();
        let s = NoiseSchedule::new(100, ScheduleKind::LinearBeta).unwrap();
        let tp = s.at(t);
        let v: Vec<f64> = v1.iter().zip(&v2).map(|(p, q)| a * p + b * q).collect();
        let lhs = m.score_vjp(&x, tp, &v).unwrap();
        let j1 = m.score_vjp(&x, tp, &v1).unwrap();
        let j2 = m.score_vjp(&x, tp, &v2).unwrap();
        let scale = j1.iter().chain(&j2).fold(1.0f64, |acc, v| acc.max(v.abs())) * (1.0 + a.abs() + b.abs());
        for i in 0..4 {
            prop_assert!((lhs[i] - (a * j1[i] + b * j2[i])).abs() <= 1e-12 * scale);
        }
    }

    #[test]
    fn bicubic_is_linear_and_adjoint(
        h in 2usize..8, w in 2usize..8, a in -2.0f64..2.0, seed in 0u64..1000,
    ) {
        let shape = GridShape::new(h, w, 1).unwrap();
        let mut r = rng::stream(seed, 0);
        let x = rng::normal_vec(&mut r, shape.len());
        let y = rng::normal_vec(&mut r, shape.len());
        let v = rng::normal_vec(&mut r, shape.upsampled().len());
        let z: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + q).collect();
        let hz = bicubic_up4(&z, shape).unwrap();
        let hx = bicubic_up4(&x, shape).unwrap();
        let hy = bicubic_up4(&y, shape).unwrap();
        for i in 0..hz.len() {
            prop_assert!(close(hz[i], a * hx[i] + hy[i], 1e-12));
        }
        let lhs: f64 = hx.iter().zip(&v).map(|(p, q)| p * q).sum();
        let rhs: f64 = x.iter().zip(bicubic_vjp(&v, shape).unwrap()).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10);
    }

    #[test]
    fn l1_gradient_is_the_sign_of_the_difference(a in vec_of(8), b in vec_of(8)) {
        let g = Norm::L1.grad(&a, &b).unwrap();
        for i in 0..8 {
            prop_assert_eq!(g[i], sign(a[i] - b[i]));
        }
        let g2 = Norm::L2.grad(&a, &b).unwrap();
        for i in 0..8 {
            prop_assert!(close(g2[i], 2.0 * (a[i] - b[i]), 1e-15));
        }
    }

    #[test]
    fn tensor_records_roundtrip(dims in prop::collection::vec(0usize..5, 0..4), seed in 0u64..1000) {
        let n: usize = dims.iter().product();
        let mut r = rng::stream(seed, 0);
        let t = Tensor::new(dims, rng::normal_vec(&mut r, n)).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        prop_assert_eq!(buf.len(), 8 + 4 + 4 * t.dims.len() + 8 * n);
        let back = read_tensor(&mut buf.as_slice()).unwrap().unwrap();
        prop_assert_eq!(back, t);
    }
}

#[test]
fn forward_process_moments_match_monte_carlo() {
    let s = NoiseSchedule::new(100, ScheduleKind::LinearBeta).unwrap();
    let x0 = [1.5, -0.5];
    let n = 100_000;
    let mut r = rng::stream(3, 0);
    for t in [1, 10, 50, 100] {
        let sig = s.sigma(t);
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let xt = s.forward_diffuse(&x0, t, &rng::normal_vec(&mut r, 2)).unwrap();
            for d in 0..2 {
                sum[d] += xt[d];
                sq[d] += xt[d] * xt[d];
            }
        }
        for d in 0..2 {
            let mean = sum[d] / n as f64;
            let var = sq[d] / n as f64 - mean * mean;
            let want_var = 1.0 - sig;
            let se = (want_var / n as f64).sqrt();
            assert!((mean - sig.sqrt() * x0[d]).abs() < 4.0 * se, "t = {t}: mean {mean}");
            let se_v = want_var * (2.0 / n as f64).sqrt();
            assert!((var - want_var).abs() < 4.0 * se_v, "t = {t}: var {var} vs {want_var}");
        }
    }
}

#[test]
fn truncated_tensor_files_are_rejected() {
    let mut buf = Vec::new();
    write_tensor(&mut buf, &Tensor::vector(vec![1.0, 2.0])).unwrap();
    buf.truncate(buf.len() - 3);
    assert!(read_tensor(&mut buf.as_slice()).is_err());
    assert!(read_tensor(&mut &b"NOTMAGIC\0\0\0\0"[..]).is_err());
    assert!(read_tensor(&mut &b""[..]).unwrap().is_none());
}
