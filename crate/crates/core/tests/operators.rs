use mimicdiff::operators::{
    bicubic_up4, bicubic_up4_with, bicubic_vjp, dense_bicubic_matrix, nonlinear_lift, nonlinear_lift_vjp,
    source_coordinate, CubicKernel, GridShape, Operator, UPSCALE,
};
use mimicdiff::rng;
use rand::Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output indices along an axis whose four taps are all inside the grid.
fn interior(len: usize) -> Vec<usize> {
    (0..UPSCALE * len)
        .filter(|&o| {
            let b = source_coordinate(o).floor();
            b >= 1.0 && b + 2.0 <= (len - 1) as f64
        })
        .collect()
}

fn cubic(c: &[f64; 4], u: f64) -> f64 {
    ((c[3] * u + c[2]) * u + c[1]) * u + c[0]
}

#[test]
fn reproduces_cubic_polynomials_at_interior_sites() {
    let mut r = rng::stream(1, 0);
    for (h, w) in [(6, 6), (8, 5), (7, 10)] {
        let shape = GridShape::new(h, w, 1).unwrap();
        let cy: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let cx: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
        let p = |y: f64, x: f64| cubic(&cy, y) * cubic(&cx, x) + cubic(&cx, y) - cubic(&cy, x);
        let img: Vec<f64> = (0..h).flat_map(|y| (0..w).map(move |x| p(y as f64, x as f64))).collect();
        let up = bicubic_up4(&img, shape).unwrap();
        let (rows, cols) = (interior(h), interior(w));
        assert!(!rows.is_empty() && !cols.is_empty());
        for &oy in &rows {
            for &ox in &cols {
                let want = p(source_coordinate(oy), source_coordinate(ox));
                let got = up[oy * UPSCALE * w + ox];
                assert!((got - want).abs() <= 1e-9, "({oy}, {ox}): {got} vs {want}");
            }
        }
    }
}

#[test]
fn catmull_rom_is_exact_only_up_to_quadratics() {
    let shape = GridShape::new(8, 8, 1).unwrap();
    let quad = |y: f64, x: f64| 0.3 * y * y - 0.2 * x * y + x;
    let cube = |y: f64, x: f64| 0.1 * x * x * x + y;
    let site = |f: &dyn Fn(f64, f64) -> f64| -> f64 {
        let img: Vec<f64> = (0..8).flat_map(|y| (0..8).map(move |x| (y, x))).map(|(y, x)| f(y as f64, x as f64)).collect();
        let up = bicubic_up4_with(&img, shape, CubicKernel::CatmullRom).unwrap();
        let mut worst: f64 = 0.0;
        for &oy in &interior(8) {
            for &ox in &interior(8) {
                let want = f(source_coordinate(oy), source_coordinate(ox));
                worst = worst.max((up[oy * 32 + ox] - want).abs());
            }
        }
        worst
    };
    assert!(site(&quad) <= 1e-9);
    assert!(site(&cube) > 1e-4);
}

#[test]
fn adjoint_identity_over_random_pairs() {
    let mut r = rng::stream(2, 0);
    for i in 0..50 {
        let shape = GridShape::new(r.random_range(2..12), r.random_range(2..12), 1 + i % 3).unwrap();
        let x = rng::normal_vec(&mut r, shape.len());
        let v = rng::normal_vec(&mut r, shape.upsampled().len());
        let lhs = dot(&bicubic_up4(&x, shape).unwrap(), &v);
        let rhs = dot(&x, &bicubic_vjp(&v, shape).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10, "pair {i}: {lhs} vs {rhs}");
    }
}

#[test]
fn output_is_four_times_each_side() {
    for (h, w, c) in [(2, 2, 1), (8, 8, 1), (3, 7, 2), (28, 28, 1)] {
        let shape = GridShape::new(h, w, c).unwrap();
        let up = shape.upsampled();
        assert_eq!((up.height, up.width, up.channels), (4 * h, 4 * w, c));
        assert_eq!(bicubic_up4(&vec![0.5; shape.len()], shape).unwrap().len(), 16 * h * w * c);
    }
}

#[test]
fn constant_images_stay_constant() {
    let shape = GridShape::new(5, 3, 1).unwrap();
    let up = bicubic_up4(&[0.7; 15], shape).unwrap();
    assert!(up.iter().all(|v| (v - 0.7).abs() < 1e-12));
}

#[test]
fn matrix_free_agrees_with_dense_matrix() {
    let shape = GridShape::new(4, 6, 1).unwrap();
    let m = dense_bicubic_matrix(shape, CubicKernel::Lagrange).unwrap();
    let dense = Operator::Dense(m);
    let free = Operator::bicubic(shape);
    let mut r = rng::stream(3, 0);
    let x = rng::normal_vec(&mut r, shape.len());
    let v = rng::normal_vec(&mut r, shape.upsampled().len());
    for (a, b) in dense.apply(&x).unwrap().iter().zip(free.apply(&x).unwrap()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in dense.vjp(&x, &v).unwrap().iter().zip(free.vjp(&x, &v).unwrap()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn rejects_mismatched_inputs() {
    let shape = GridShape::new(4, 4, 1).unwrap();
    assert!(bicubic_up4(&[0.0; 15], shape).is_err());
    assert!(bicubic_vjp(&[0.0; 16], shape).is_err());
    assert!(bicubic_up4(&[0.0; 4], GridShape::new(1, 4, 1).unwrap()).is_err());
    assert!(GridShape::new(0, 4, 1).is_err());
}

#[test]
fn lift_vjp_matches_finite_differences() {
    let mut r = rng::stream(4, 0);
    let x = rng::normal_vec(&mut r, 5);
    let v = rng::normal_vec(&mut r, 15);
    let analytic = nonlinear_lift_vjp(&x, &v).unwrap();
    let h = 1e-6;
    for i in 0..5 {
        let mut up = x.clone();
        up[i] += h;
        let mut down = x.clone();
        down[i] -= h;
        let fd = (dot(&nonlinear_lift(&up), &v) - dot(&nonlinear_lift(&down), &v)) / (2.0 * h);
        assert!((fd - analytic[i]).abs() < 1e-7);
    }
}
