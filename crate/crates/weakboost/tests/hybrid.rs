use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use weakboost::cir::CirParams;
use weakboost::heston::HestonParams;
use weakboost::hybrid::*;
use weakboost::reference::{heston_put_fourier, PutSpec};

fn fig31() -> HestonParams<f64> {
    let cir = CirParams::new(0.2, 1.0, 0.5, 0.2).unwrap();
    HestonParams::new(100.0, 0.0, 0.0, -0.7, cir).unwrap()
}

#[test]
fn coordinate_change() {
    let p = fig31();
    let (x, y) = transform_initial(100.0, 0.0, &p).unwrap();
    assert_relative_eq!(x, 100f64.ln(), max_relative = 1e-15);
    assert_eq!(y, 0.0);
    let (x, _) = transform_initial(100.0, 0.2, &p).unwrap();
    assert_relative_eq!((x + p.rho / p.cir.sigma * 0.2).exp(), 100.0, max_relative = 1e-14);
    let flat = HestonParams { rho: 0.0, ..p };
    assert_relative_eq!(transform_initial(37.0, 0.4, &flat).unwrap().0, 37f64.ln(), max_relative = 1e-15);
    assert!(transform_initial(0.0, 0.2, &p).is_err());
}

#[test]
fn lattice_structure() {
    let p = fig31();
    let steps = 50;
    let lat = build_lattice(0.2, &p.cir, steps, 1.0).unwrap();
    assert_eq!(lat.nodes[0], vec![0.2]);
    assert!(build_lattice(0.2, &p.cir, 0, 1.0).is_err());
    for n in 0..steps {
        assert_eq!(lat.nodes[n].len(), n + 1);
        for k in 0..=n {
            let r = 0.2f64.sqrt() + 0.25 * (2.0 * k as f64 - n as f64) * lat.h.sqrt();
            let want = if r > 0.0 { r * r } else { 0.0 };
            assert_relative_eq!(lat.nodes[n][k], want, max_relative = 1e-14);
            let (ku, kd, pu) = (lat.k_up[n][k], lat.k_down[n][k], lat.p_up[n][k]);
            assert!((0.0..=1.0).contains(&pu));
            assert!(kd <= k && k < ku && ku <= n + 1);
            // One-step mean matching when the clamp is inactive.
            let y = lat.nodes[n][k];
            let target = y + (p.cir.a - p.cir.b * y) * lat.h;
            let next = &lat.nodes[n + 1];
            if next[kd] <= target && target <= next[ku] && next[ku] > next[kd] {
                let mean = pu * next[ku] + (1.0 - pu) * next[kd];
                assert_relative_eq!(mean, target, max_relative = 1e-12);
            }
        }
    }
}

#[test]
fn lattice_clamps_at_zero() {
    let cir = CirParams::new(0.01, 1.0, 1.0, 0.01).unwrap();
    let lat = build_lattice(0.01, &cir, 40, 1.0).unwrap();
    assert!(lat.nodes[40][0] == 0.0);
    assert!(lat.nodes.iter().flatten().all(|&y| y >= 0.0));
}

#[test]
fn operator_rows() {
    let p = fig31();
    for &y in &[0.0, 0.05, 0.2, 1.3] {
        let op = assemble_operator(y, &p, 0.01, 0.01, 41);
        for i in 0..41 {
            let sum = op.sub[i] + op.diag[i] + op.sup[i];
            assert_relative_eq!(sum, 1.0, max_relative = 1e-13);
            assert!(op.diag[i] > 0.0 && op.sub[i] <= 0.0 && op.sup[i] <= 0.0);
        }
        for i in [0, 40] {
            assert_eq!((op.sub[i], op.diag[i], op.sup[i]), (0.0, 1.0, 0.0));
        }
    }
}

#[test]
fn operator_is_identity_without_drift_or_variance() {
    let cir = CirParams::<f64>::new(0.2, 1.0, 0.5, 0.0).unwrap();
    // r = delta + rho a / sigma makes the drift vanish at y = 0.
    let p = HestonParams::new(100.0, -0.7 * 0.2 / 0.5, 0.0, -0.7, cir).unwrap();
    assert!(mu_x(0.0, &p).abs() < 1e-15);
    let op = assemble_operator(0.0, &p, 0.01, 0.01, 7);
    for i in 0..7 {
        assert!(op.sub[i].abs() < 1e-15 && (op.diag[i] - 1.0).abs() < 1e-15 && op.sup[i].abs() < 1e-15);
    }
}

#[test]
fn implicit_solve_properties() {
    let p = fig31();
    let op = assemble_operator(0.3, &p, 0.02, 0.01, 101);
    assert_eq!(implicit_solve(&op, &vec![0.0; 101]).unwrap(), vec![0.0; 101]);
    for v in implicit_solve(&op, &vec![3.5; 101]).unwrap() {
        assert!((v - 3.5).abs() < 1e-12);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let rhs: Vec<f64> = (0..101).map(|_| rng.random_range(-2.0..2.0)).collect();
        let sol = implicit_solve(&op, &rhs).unwrap();
        let norm = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(norm(&sol) <= norm(&rhs) * (1.0 + 1e-12));
        // Residual of the tridiagonal product.
        for i in 0..101 {
            let mut r = op.diag[i] * sol[i];
            if i > 0 {
                r += op.sub[i] * sol[i - 1];
            }
            if i < 100 {
                r += op.sup[i] * sol[i + 1];
            }
            assert!((r - rhs[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_pivot_is_reported() {
    let op = TridiagonalOp { sub: vec![0.0, 1.0], diag: vec![1.0, 1.0], sup: vec![1.0, 0.0] };
    assert!(implicit_solve(&op, &[1.0, 1.0]).is_err());
}

#[test]
fn sweep_preserves_constants_and_bounds() {
    let p = fig31();
    let lat = build_lattice(0.2, &p.cir, 20, 1.0).unwrap();
    let grid = default_grid(&p, 1.0, 0.02, 6.0);
    let flat = backward_sweep(&lat, &grid, &p, |_, _| 2.0).unwrap();
    assert!(flat.iter().all(|v| (v - 2.0).abs() < 1e-12));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (c0, c1, c2) = (rng.random_range(-1.0..1.0), rng.random_range(-3.0..3.0), rng.random_range(-2.0..2.0));
        let f = move |x: f64, y: f64| (c0 + c1 * (x - 4.6).sin() + c2 * y).clamp(-1.5, 1.5);
        let (lo, hi) = grid
            .points()
            .iter()
            .flat_map(|&x| lat.nodes[20].iter().map(move |&y| f(x, y)))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let u = backward_sweep(&lat, &grid, &p, f).unwrap();
        assert!(u.iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        let g = move |x: f64, y: f64| f(x, y) + 0.1 * (x.cos() + 1.0);
        let w = backward_sweep(&lat, &grid, &p, g).unwrap();
        assert!(u.iter().zip(&w).all(|(a, b)| a <= &(b + 1e-12)));
    }
}

#[test]
fn single_step_with_frozen_variance() {
    let cir = CirParams::new(0.2, 1.0, 1e-8, 0.2).unwrap();
    let p = HestonParams::new(100.0, 0.0, 0.0, -0.7, cir).unwrap();
    let lat = build_lattice(0.2, &p.cir, 1, 0.5).unwrap();
    let grid = XGrid { x0: 4.6, dx: 0.05, half: 30 };
    let f = |x: f64, _| (x - 4.6).max(0.0);
    let u = backward_sweep(&lat, &grid, &p, f).unwrap();
    let op = assemble_operator(0.2, &p, 0.5, 0.05, grid.len());
    let pu = lat.p_up[0][0];
    let up: Vec<f64> = grid.points().iter().map(|&x| f(x, 0.0)).collect();
    let direct = implicit_solve(&op, &up).unwrap();
    for (a, b) in u.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-12 * (1.0 + pu));
    }
    assert!(u.windows(2).all(|w| w[0] <= w[1] + 1e-15));
}

#[test]
fn put_surface_decreases_in_x() {
    let p = fig31();
    let price = hybrid_put(&p, 105.0, 1.0, 40, 0.02, 6.0).unwrap();
    assert!(price.surface.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    assert_eq!(price.surface.len(), price.grid.len());
}

#[test]
fn put_price_converges_to_the_fourier_value() {
    let p = fig31();
    let reference = heston_put_fourier(&p, &PutSpec::new(105.0, 1.0).unwrap()).unwrap();
    let coarse = hybrid_put(&p, 105.0, 1.0, 100, 0.01, 6.0).unwrap().price;
    let fine = hybrid_put(&p, 105.0, 1.0, 200, 0.005, 6.0).unwrap().price;
    let (e1, e2) = ((coarse - reference).abs(), (fine - reference).abs());
    assert!(e1 / reference < 0.01, "{coarse} vs {reference}");
    assert!(e2 < e1);
}

#[test]
fn grid_is_wide_enough() {
    let p = fig31();
    let a = hybrid_put(&p, 105.0, 1.0, 50, 0.02, 6.0).unwrap().price;
    let b = hybrid_put(&p, 105.0, 1.0, 50, 0.02, 8.0).unwrap().price;
    assert!((a - b).abs() < 1e-4 * a);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_parameters_keep_probabilities_valid(
        a in 0.01..1.0f64, b in 0.0..3.0f64, sigma in 0.05..2.0f64, y0 in 0.0..1.0f64, steps in 1usize..60
    ) {
        let cir = CirParams::new(a, b, sigma, y0).unwrap();
        let lat = build_lattice(y0, &cir, steps, 1.0).unwrap();
        for n in 0..steps {
            for k in 0..=n {
                prop_assert!((0.0..=1.0).contains(&lat.p_up[n][k]));
                prop_assert!(lat.k_down[n][k] <= k && k < lat.k_up[n][k] && lat.k_up[n][k] <= n + 1);
            }
        }
    }
}
