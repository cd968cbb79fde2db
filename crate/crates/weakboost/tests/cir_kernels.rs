use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Gamma as GammaDist, Normal};
use weakboost::cir::*;
use weakboost::engine::Welford;
use weakboost::reference::cir_laplace;
use weakboost::Error;

fn fig_params(x0: f64) -> CirParams<f64> {
    CirParams::new(0.2, 0.5, 0.65, x0).unwrap()
}

/// `1 - e^{-z}` by its Taylor series, summed until the terms vanish.
fn one_minus_exp_series(z: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 0.0;
    for k in 1..60 {
        term *= z / k as f64;
        sum += if k % 2 == 1 { term } else { -term };
    }
    sum
}

#[test]
fn psi_conventions_and_value() {
    assert_eq!(psi(0.0, 0.5), 0.5);
    assert_eq!(psi(1.3, 0.0), 0.0);
    assert_relative_eq!(psi(1.0, 1.0), one_minus_exp_series(1.0), max_relative = 1e-15);
    assert_relative_eq!(psi(1.0, 1.0), 0.632_120_558_828_557_7, max_relative = 1e-15);
}

#[test]
fn psi_series_branch_is_continuous() {
    for &b in &[-2.0f64, -0.3, 0.7, 3.0] {
        for &t in &[1e-9, 1e-7, 3e-5, 9.9e-5 / b.abs(), 1.01e-4 / b.abs()] {
            let direct = one_minus_exp_series(b * t) / b;
            assert_relative_eq!(psi(b, t), direct, max_relative = 1e-14);
        }
    }
}

#[test]
fn flow_x0_values() {
    let p = fig_params(0.0);
    assert_eq!(flow_x0(0.0, 0.3, &p).unwrap(), 0.3);
    let v = flow_x0(1.0, 0.0, &p).unwrap();
    let oracle = one_minus_exp_series(0.5) / 0.5 * (0.2 - 0.65 * 0.65 / 4.0);
    assert_relative_eq!(v, oracle, max_relative = 1e-14);
    let flat = CirParams::new(0.3, 0.0, 0.5, 0.0).unwrap();
    assert_relative_eq!(flow_x0(0.7, 0.4, &flat).unwrap(), 0.4 + 0.7 * (0.3 - 0.0625), max_relative = 1e-15);
}

#[test]
fn flow_x0_rejects_high_volatility() {
    let p = CirParams::new(0.2, 0.5, 1.5, 0.1).unwrap();
    assert!(matches!(flow_x0(0.1, 0.1, &p), Err(Error::Regime { .. })));
    assert!(matches!(nv_cir_step(0.1, 0.1, 0.0, &p), Err(Error::Regime { .. })));
}

#[test]
fn flow_x1_values() {
    assert_relative_eq!(flow_x1(0.0, 0.37, 0.8), 0.37, max_relative = 1e-15);
    assert_relative_eq!(flow_x1(1.3, 0.0, 0.8), (1.3 * 0.4f64).powi(2), max_relative = 1e-15);
    assert_eq!(flow_x1(0.5, 1.0, 2.0), 2.25);
}

#[test]
fn nv_step_composes_the_flows() {
    let p = fig_params(0.0);
    assert_relative_eq!(nv_cir_step(0.3, 0.0, 1.7, &p).unwrap(), 0.3, max_relative = 1e-15);
    let (x, t, g) = (0.2, 0.25, 1.0);
    let a = flow_x0(t / 2.0, x, &p).unwrap();
    let b = flow_x1(t.sqrt() * g, a, p.sigma);
    let c = flow_x0(t / 2.0, b, &p).unwrap();
    assert_relative_eq!(nv_cir_step(x, t, g, &p).unwrap(), c, max_relative = 1e-14);
}

/// `E[(c + e (sqrt(m) + s N)^2)^k]` by expanding the powers of a Gaussian.
fn nv_moment(k: usize, x: f64, t: f64, p: &CirParams<f64>) -> f64 {
    let e = (-p.b * t / 2.0).exp();
    let half_psi = if p.b == 0.0 { t / 2.0 } else { one_minus_exp_series(p.b * t / 2.0) / p.b };
    let c = half_psi * (p.a - p.sigma * p.sigma / 4.0);
    let m = e * x + c;
    let s = p.sigma * t.sqrt() / 2.0;
    let gauss = |j: usize| -> f64 {
        if j % 2 == 1 {
            0.0
        } else {
            (1..j).step_by(2).map(|i| i as f64).product()
        }
    };
    let binom = |n: usize, r: usize| -> f64 { (0..r).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64) };
    // E[(sqrt(m) + sN)^{2i}]
    let sq = |i: usize| -> f64 {
        (0..=2 * i).map(|j| binom(2 * i, j) * m.sqrt().powi((2 * i - j) as i32) * s.powi(j as i32) * gauss(j)).sum()
    };
    (0..=k).map(|i| binom(k, i) * c.powi((k - i) as i32) * e.powi(i as i32) * sq(i)).sum()
}

#[test]
fn nv_mean_is_exact_without_mean_reversion() {
    let p = CirParams::new(0.3, 0.0, 0.6, 0.0).unwrap();
    for &(x, t) in &[(0.0, 0.1), (0.4, 0.5), (1.2, 1.0)] {
        assert_relative_eq!(nv_moment(1, x, t, &p), x + p.a * t, max_relative = 1e-13);
    }
}

#[test]
fn nv_local_moment_error_is_third_order() {
    let p = CirParams::new(0.2, 0.5, 0.65, 0.0).unwrap();
    let x = 0.3;
    for m in 1..=4 {
        let d = |t: f64| (nv_moment(m, x, t, &p) - moment_exact(m, t, x, &p)).abs();
        for j in 5..10 {
            let t = 0.5f64.powi(j);
            let ratio = d(t) / d(t / 2.0);
            assert!((6.0..=10.0).contains(&ratio), "m={m} t={t} ratio={ratio}");
        }
    }
}

/// Moments through the ODE chain `u_m' = (a m + sigma^2 m (m-1)/2) u_{m-1} - b m u_m`, RK4.
fn moments_ode(deg: usize, t: f64, x: f64, p: &CirParams<f64>) -> Vec<f64> {
    let steps = 10_000;
    let h = t / steps as f64;
    let rhs = |u: &[f64]| -> Vec<f64> {
        (0..=deg)
            .map(|m| {
                if m == 0 {
                    0.0
                } else {
                    let mf = m as f64;
                    (p.a * mf + p.sigma * p.sigma * mf * (mf - 1.0) / 2.0) * u[m - 1] - p.b * mf * u[m]
                }
            })
            .collect()
    };
    let mut u: Vec<f64> = (0..=deg).map(|m| x.powi(m as i32)).collect();
    for _ in 0..steps {
        let k1 = rhs(&u);
        let u2: Vec<f64> = u.iter().zip(&k1).map(|(a, k)| a + h / 2.0 * k).collect();
        let k2 = rhs(&u2);
        let u3: Vec<f64> = u.iter().zip(&k2).map(|(a, k)| a + h / 2.0 * k).collect();
        let k3 = rhs(&u3);
        let u4: Vec<f64> = u.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
        let k4 = rhs(&u4);
        for i in 0..=deg {
            u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    u
}

#[test]
fn moment_exact_low_degrees() {
    let p = CirParams::new(0.2, 0.5, 0.65, 0.0).unwrap();
    assert_eq!(moment_exact(0, 0.7, 0.3, &p), 1.0);
    let first = 0.3 * (-0.35f64).exp() + 0.2 * psi(0.5, 0.7);
    assert_relative_eq!(moment_exact(1, 0.7, 0.3, &p), first, max_relative = 1e-14);
}

#[test]
fn moment_exact_matches_ode_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    use rand::Rng;
    for _ in 0..100 {
        let p = CirParams::new(rng.random_range(0.0..1.0), rng.random_range(-0.5..2.0), rng.random_range(0.1..1.5), 0.0)
            .unwrap();
        let x = rng.random_range(0.0..1.0);
        let t = rng.random_range(0.05..1.5);
        let ode = moments_ode(6, t, x, &p);
        for l in 0..=6 {
            assert_relative_eq!(moment_exact(l, t, x, &p), ode[l], max_relative = 1e-10);
        }
    }
}

#[test]
fn moment_table_invariants() {
    for &v in &[0.01, 0.5, 2.0, 7.5] {
        let table = MomentTable::new(6, v);
        for l in 0..=6 {
            assert_eq!(table.get(l, l), 1.0);
            for j in 0..=l {
                assert!(table.get(j, l) > 0.0);
            }
        }
    }
}

#[test]
fn threshold_is_zero_in_low_volatility_and_at_zero_time() {
    let low = fig_params(0.0);
    assert_eq!(threshold_k2(0.5, &low, 3f64.sqrt()), 0.0);
    let high = CirParams::new(0.2, 0.5, 1.5, 0.0).unwrap();
    assert_eq!(threshold_k2(0.0, &high, 3f64.sqrt()), 0.0);
}

#[test]
fn threshold_keeps_the_splitting_step_defined() {
    let p = CirParams::new(0.2, 0.5, 1.5, 0.0).unwrap();
    let (t, ay) = (0.5, 3f64.sqrt());
    let k2 = threshold_k2(t, &p, ay);
    assert!(k2 > 0.0);
    // The inner drift flow must stay nonnegative and the square root argument must not cross zero.
    let c = p.sigma * p.sigma / 4.0 - p.a;
    let ps = psi(p.b, t / 2.0);
    for i in 0..200 {
        let x = k2 * (1.0 + i as f64 * 0.05);
        let inner = (-p.b * t / 2.0).exp() * x - ps * c;
        assert!(inner >= -1e-15);
        for &w in &[-ay, ay] {
            let r = inner.max(0.0).sqrt() + p.sigma / 2.0 * w * t.sqrt();
            let outer = (-p.b * t / 2.0).exp() * r * r - ps * c;
            assert!(outer >= -1e-12, "x={x} w={w} outer={outer}");
        }
    }
}

#[test]
fn threshold_is_nondecreasing_in_time() {
    let p = CirParams::new(0.2, 0.5, 1.5, 0.0).unwrap();
    let mut prev = 0.0;
    for i in 1..=400 {
        let t = i as f64 / 400.0;
        let k = threshold_k2(t, &p, 3.5);
        assert!(k >= prev);
        prev = k;
    }
}

#[test]
fn phi_b_constants() {
    assert_eq!(PHI_B_Z1, 2.7523451704710586);
    assert_eq!(PHI_B_Z2, 3.5);
    assert_eq!(PHI_B_C1, 2.58);
    assert_eq!(PHI_B_C2, 3.106520327375868);
}

/// Composite Simpson rule.
fn simpson(lo: f64, hi: f64, n: usize, g: impl Fn(f64) -> f64) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = g(lo) + g(hi);
    for i in 1..n {
        s += g(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

#[test]
fn phi_b_variable_matches_gaussian_moments() {
    let dens = |n: f64| (-n * n / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let tail = |lo: f64, hi: f64| normal.cdf(hi) - normal.cdf(lo);
    let moment = |k: i32| {
        let body = simpson(-PHI_B_C1, PHI_B_C1, 20_000, |n| n.powi(k) * dens(n));
        let mid = 2.0 * PHI_B_Z1.powi(k) * tail(PHI_B_C1, PHI_B_C2);
        let far = 2.0 * PHI_B_Z2.powi(k) * tail(PHI_B_C2, f64::INFINITY);
        body + mid + far
    };
    assert!((moment(2) - 1.0).abs() < 1e-9, "{}", moment(2));
    assert!((moment(4) - 3.0).abs() < 1e-8, "{}", moment(4));
    for n in [-4.0f64, -3.2, -2.9, 0.3, 2.6, 3.2] {
        assert!(phi_b_variable(n).abs() <= PHI_B_Z2);
    }
}

#[test]
fn phi_a_variable_weights() {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let (lo, hi) = (normal.inverse_cdf(1.0 / 6.0), normal.inverse_cdf(5.0 / 6.0));
    assert_eq!(phi_a_variable(lo - 1e-9, lo, hi), -3f64.sqrt());
    assert_eq!(phi_a_variable(0.0, lo, hi), 0.0);
    assert_eq!(phi_a_variable(hi + 1e-9, lo, hi), 3f64.sqrt());
}

#[test]
fn two_point_weight_limits() {
    assert_eq!(pi_two_point(0.4, 0.0), 0.0);
    assert_relative_eq!(pi_two_point(0.4, 0.16), 0.5, max_relative = 1e-12);
    // A two-atom law {0, 1} with mass 1/2 on each: m1 = 1/2, m2 = 1/2.
    assert_relative_eq!(pi_two_point(0.5, 0.5), 0.5 * (1.0 - 0.5f64.sqrt()), max_relative = 1e-12);
}

#[test]
fn lower_branches_match_two_moments() {
    let p = CirParams::new(0.2, 0.5, 1.5, 0.0).unwrap();
    let t = 0.5;
    let c = CirStepCoeffs::new(&p, t);
    let normal = Normal::new(0.0, 1.0).unwrap();
    for &x in &[0.0, 0.01, 0.5 * f64::min(c.k2_a, c.k2_b)] {
        let m1 = moment_exact(1, t, x, &p);
        let m2 = moment_exact(2, t, x, &p);
        let pi = pi_two_point(m1, m2);
        // Two-point law of the first scheme.
        let lo = c.step_a(x, normal.inverse_cdf(0.5 * (1.0 - pi)));
        let up = c.step_a(x, normal.inverse_cdf(1.0 - 0.5 * pi));
        assert_relative_eq!((1.0 - pi) * lo + pi * up, m1, max_relative = 1e-12);
        assert_relative_eq!((1.0 - pi) * lo * lo + pi * up * up, m2, max_relative = 1e-12);
        // Scaled beta law of the second scheme, integrated in the uniform variable.
        let g = |u: f64, k: i32| c.step_b(x, normal.inverse_cdf(u)).powi(k);
        let e1 = simpson(1e-12, 1.0 - 1e-12, 200_000, |u| g(u, 1));
        assert_relative_eq!(e1, m1, max_relative = 1e-4);
    }
}

#[test]
fn steps_are_identity_at_zero_time() {
    let p = CirParams::new(0.2, 0.5, 1.5, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    assert_eq!(general_second_order_step_a(0.3, 0.0, 0.7, &p), 0.3);
    assert_eq!(second_order_step_b(0.3, 0.0, 0.7, &p), 0.3);
    assert_eq!(exact_cir_sample(0.0, 0.3, &p, &mut rng), 0.3);
    assert_eq!(poisson_first_order_step(0.3, 0.0, &p, &mut rng), 0.3);
}

#[test]
fn low_volatility_first_scheme_always_uses_the_splitting_branch() {
    let p = fig_params(0.0);
    let c = CirStepCoeffs::new(&p, 0.3);
    assert_eq!(c.k2_a, 0.0);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let g = normal.inverse_cdf(0.9);
    assert_relative_eq!(c.step_a(0.0, g), c.nv.apply(0.0, 3f64.sqrt()), max_relative = 1e-15);
}

#[test]
fn exact_sampler_degenerate_atom() {
    let p = CirParams::new(0.0, 0.5, 0.8, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        assert_eq!(exact_cir_sample(0.7, 0.0, &p, &mut rng), 0.0);
    }
}

#[test]
fn exact_sampler_mean_and_laplace() {
    let p = fig_params(0.0);
    let (t, x) = (0.8, 0.15);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut m, mut l) = (Welford::default(), Welford::default());
    for _ in 0..1_000_000 {
        let y = exact_cir_sample(t, x, &p, &mut rng);
        m.push(y);
        l.push((-10.0 * y).exp());
    }
    let mean = x * (-p.b * t).exp() + p.a * psi(p.b, t);
    assert!((m.mean - mean).abs() < 4.0 * (m.variance() / 1e6).sqrt());
    let lap = cir_laplace(10.0, t, x, &p);
    assert!((l.mean - lap).abs() < 4.0 * (l.variance() / 1e6).sqrt());
}

/// Transition CDF as the Poisson mixture of Gamma laws, truncated at a tail below 1e-12.
fn transition_cdf(y: f64, t: f64, x: f64, p: &CirParams<f64>) -> f64 {
    let c = 4.0 / (p.sigma * p.sigma * psi(p.b, t));
    let lam = c * (-p.b * t).exp() * x / 2.0;
    let v = p.v();
    let mut w = (-lam).exp();
    let mut acc = 0.0;
    let mut mass = 0.0;
    for i in 0..10_000 {
        if i > 0 {
            w *= lam / i as f64;
        }
        acc += w * GammaDist::new(i as f64 + v, c / 2.0).unwrap().cdf(y);
        mass += w;
        if 1.0 - mass < 1e-12 && i as f64 > lam {
            break;
        }
    }
    acc
}

#[test]
fn exact_sampler_chi_square_fit() {
    let p = CirParams::new(0.2, 0.5, 0.65, 0.0).unwrap();
    let (t, x) = (0.5, 0.2);
    let edges: Vec<f64> = (1..20).map(|i| i as f64 * 0.04).collect();
    let mut probs = Vec::new();
    let mut prev = 0.0;
    for &e in &edges {
        let cdf = transition_cdf(e, t, x, &p);
        probs.push(cdf - prev);
        prev = cdf;
    }
    probs.push(1.0 - prev);
    let samples = 200_000;
    let mut counts = vec![0usize; probs.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..samples {
        let y = exact_cir_sample(t, x, &p, &mut rng);
        let bin = edges.iter().position(|&e| y < e).unwrap_or(edges.len());
        counts[bin] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&probs)
        .map(|(&o, &q)| {
            let e = q * samples as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    // 0.1% critical value with 19 degrees of freedom.
    assert!(chi2 < 43.82, "chi2 = {chi2}");
}

#[test]
fn poisson_scheme_first_moment() {
    let p = CirParams::new(0.04, 0.1, 2.0, 0.3).unwrap();
    let (t, x) = (0.25, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut w = Welford::default();
    for _ in 0..1_000_000 {
        w.push(poisson_first_order_step(x, t, &p, &mut rng));
    }
    let mean = moment_exact(1, t, x, &p);
    assert!((w.mean - mean).abs() < 4.0 * (w.variance() / 1e6).sqrt());
}

/// Raw moments 2 and 3 of `(2/c) Z` with `Z ~ Poisson(P + v)`, `P ~ Poisson(lam)`.
fn poisson_scheme_moments(t: f64, x: f64, p: &CirParams<f64>) -> (f64, f64) {
    let c = 4.0 / (p.sigma * p.sigma * psi(p.b, t));
    let lam = c * (-p.b * t).exp() * x / 2.0;
    let v = p.v();
    let (p1, p2, p3) = (lam, lam + lam * lam, lam.powi(3) + 3.0 * lam * lam + lam);
    let mu1 = p1 + v;
    let mu2 = p2 + 2.0 * v * p1 + v * v;
    let mu3 = p3 + 3.0 * v * p2 + 3.0 * v * v * p1 + v.powi(3);
    // Poisson(mu): E Z^2 = mu^2 + mu, E Z^3 = mu^3 + 3 mu^2 + mu.
    let z2 = mu2 + mu1;
    let z3 = mu3 + 3.0 * mu2 + mu1;
    (4.0 / (c * c) * z2, 8.0 / c.powi(3) * z3)
}

#[test]
fn poisson_scheme_matches_two_moments_and_misses_the_third() {
    let p = CirParams::new(0.04, 0.1, 2.0, 0.3).unwrap();
    let x = 0.3;
    for j in 0..8 {
        let t = 0.5f64.powi(j);
        let (m2, _) = poisson_scheme_moments(t, x, &p);
        assert_relative_eq!(m2, moment_exact(2, t, x, &p), max_relative = 1e-12);
    }
    let d = |t: f64| (poisson_scheme_moments(t, x, &p).1 - moment_exact(3, t, x, &p)).abs();
    for j in 2..8 {
        let t = 0.5f64.powi(j);
        let r = d(t) / d(t / 2.0);
        assert!((3.5..=4.5).contains(&r), "t={t} ratio={r}");
    }
}

#[test]
fn poisson_scheme_tiny_shape_concentrates_at_zero() {
    let p = CirParams::new(1e-9, 0.1, 2.0, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let zeros = (0..10_000).filter(|_| poisson_first_order_step(0.0, 0.5, &p, &mut rng) == 0.0).count();
    assert!(zeros >= 9_999);
}

#[test]
fn high_vol_split_constant_and_feller() {
    let p = CirParams::new(0.04, 0.1, 2.0, 0.3).unwrap();
    let split = high_vol_split(|_| 2.5, 1.0, 0.3, &p);
    assert_eq!(split.f0, 2.5);
    assert_eq!(divided_difference(|_| 2.5, split.f0, 0.7), 0.0);
    for q in [&split.shifted1, &split.shifted2] {
        assert!(q.sigma * q.sigma <= 2.0 * q.a);
    }
    assert_relative_eq!(split.weight1, 0.04 * psi(0.1, 1.0));
    assert_relative_eq!(split.weight2, (-0.1f64).exp() * 0.3);
}

#[test]
fn high_vol_split_reassembles_the_expectation() {
    let p = CirParams::new(0.04, 0.1, 2.0, 0.3).unwrap();
    let (t, x) = (1.0, 0.3);
    let f = |z: f64| (-z).exp();
    let split = high_vol_split(f, t, x, &p);
    let samples = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let (mut lhs, mut e1, mut e2) = (Welford::default(), Welford::default(), Welford::default());
    for _ in 0..samples {
        lhs.push(f(exact_cir_sample(t, x, &p, &mut rng)));
        e1.push(divided_difference(f, split.f0, exact_cir_sample(t, x, &split.shifted1, &mut rng)));
        e2.push(divided_difference(f, split.f0, exact_cir_sample(t, x, &split.shifted2, &mut rng)));
    }
    let rhs = split.reassemble(e1.mean, e2.mean);
    let m = samples as f64;
    let se = (lhs.variance() / m + split.weight1.powi(2) * e1.variance() / m + split.weight2.powi(2) * e2.variance() / m)
        .sqrt();
    assert!((lhs.mean - rhs).abs() < 4.0 * se, "lhs {} rhs {rhs} se {se}", lhs.mean);
    assert!((rhs - cir_laplace(1.0, t, x, &p)).abs() < 4.0 * se);
}

#[test]
fn generic_kernels_run_in_single_precision() {
    let p = CirParams::<f32>::new(0.2, 0.5, 0.65, 0.1).unwrap();
    let y = nv_cir_step(0.1f32, 0.25, 0.3, &p).unwrap();
    let y64 = nv_cir_step(0.1f64, 0.25, 0.3, &fig_params(0.1)).unwrap();
    assert!((y as f64 - y64).abs() < 1e-6);
    assert!((psi(1.0f32, 1.0) as f64 - psi(1.0, 1.0)).abs() < 1e-6);
}

fn any_params() -> impl Strategy<Value = CirParams<f64>> {
    (0.0..2.0f64, -1.0..3.0f64, 0.05..3.0f64).prop_map(|(a, b, s)| CirParams::new(a, b, s, 0.0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn scheme_outputs_are_nonnegative(p in any_params(), x in 0.0..3.0f64, t in 1e-4..2.0f64, g in -6.0..6.0f64) {
        let c = CirStepCoeffs::new(&p, t);
        prop_assert!(c.step_a(x, g) >= 0.0);
        prop_assert!(c.step_b(x, g) >= 0.0);
        if p.low_vol() {
            prop_assert!(nv_cir_step(x, t, g, &p).unwrap() >= 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(g.to_bits());
        prop_assert!(c.exact(x, &mut rng) >= 0.0);
        prop_assert!(c.poisson_scheme(x, &mut rng) >= 0.0);
    }

    #[test]
    fn shifted_blocks_satisfy_feller(p in any_params(), x in 0.0..2.0f64) {
        let s = high_vol_split(|z: f64| z, 1.0, x, &p);
        prop_assert!(s.shifted1.sigma.powi(2) <= 2.0 * s.shifted1.a);
        prop_assert!(s.shifted2.sigma.powi(2) <= 2.0 * s.shifted2.a);
    }
}
