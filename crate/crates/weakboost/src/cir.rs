//! One-step kernels and closed forms for the square-root diffusion
//! `dX = (a - bX) dt + sigma sqrt(X) dW`.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson};

use crate::error::{Error, Result};
use crate::grids::{Coupling, GridScheme};
use crate::real::{lit, norm_cdf, norm_inv, to_f64, Real};

/// CIR coefficients and start value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CirParams<F> {
    pub a: F,
    pub b: F,
    pub sigma: F,
    pub x0: F,
}

impl<F: Real> CirParams<F> {
    pub fn new(a: F, b: F, sigma: F, x0: F) -> Result<Self> {
        let ok = a.is_finite() && b.is_finite() && sigma.is_finite() && x0.is_finite();
        if !ok || a < F::zero() || sigma <= F::zero() || x0 < F::zero() {
            return Err(Error::InvalidParameter(format!(
                "CIR needs a >= 0, sigma > 0, x0 >= 0 (a={a}, b={b}, sigma={sigma}, x0={x0})"
            )));
        }
        Ok(Self { a, b, sigma, x0 })
    }

    /// `sigma^2 <= 4a`, the domain of the Ninomiya-Victoir step.
    pub fn low_vol(&self) -> bool {
        self.sigma * self.sigma <= lit::<F>(4.0) * self.a
    }

    pub fn check_low_vol(&self, what: &'static str) -> Result<()> {
        if self.low_vol() {
            Ok(())
        } else {
            Err(Error::Regime {
                what,
                sigma2: to_f64(self.sigma * self.sigma),
                four_a: to_f64(lit::<F>(4.0) * self.a),
            })
        }
    }

    /// `v = 2a / sigma^2`.
    pub fn v(&self) -> F {
        lit::<F>(2.0) * self.a / (self.sigma * self.sigma)
    }

    pub fn with_start(mut self, x0: F) -> Self {
        self.x0 = x0;
        self
    }

    pub fn with_a(mut self, a: F) -> Self {
        self.a = a;
        self
    }
}

/// `psi_b(t) = (1 - e^{-bt}) / b`, equal to `t` when `b = 0`.
pub fn psi<F: Real>(b: F, t: F) -> F {
    let z = b * t;
    if z.abs() < lit(1e-4) {
        // (1 - e^{-z}) / z = sum_k (-z)^k / (k+1)!
        let series = F::one()
            - z * (lit::<F>(0.5)
                - z * (lit::<F>(1.0 / 6.0)
                    - z * (lit::<F>(1.0 / 24.0)
                        - z * (lit::<F>(1.0 / 120.0)
                            - z * (lit::<F>(1.0 / 720.0) - z * lit::<F>(1.0 / 5040.0))))));
        t * series
    } else {
        -(-z).exp_m1() / b
    }
}

/// Drift flow `X0(t, x) = e^{-bt} x + psi_b(t) (a - sigma^2/4)`.
pub fn flow_x0<F: Real>(t: F, x: F, p: &CirParams<F>) -> Result<F> {
    p.check_low_vol("flow_x0")?;
    Ok(flow_x0_unchecked(t, x, p))
}

#[inline]
fn flow_x0_unchecked<F: Real>(t: F, x: F, p: &CirParams<F>) -> F {
    (-p.b * t).exp() * x + psi(p.b, t) * (p.a - p.sigma * p.sigma / lit(4.0))
}

/// Diffusion flow `X1(w, x) = (sqrt(x) + w sigma / 2)^2`.
#[inline]
pub fn flow_x1<F: Real>(w: F, x: F, sigma: F) -> F {
    let r = x.sqrt() + w * sigma / lit(2.0);
    r * r
}

/// Precomputed coefficients of `x -> X0(t/2, X1(sqrt(t) g, X0(t/2, x)))`.
#[derive(Clone, Copy, Debug)]
pub struct NvCoeffs<F> {
    pub e_half: F,
    pub drift_half: F,
    pub scale: F,
}

impl<F: Real> NvCoeffs<F> {
    pub fn new(p: &CirParams<F>, t: F) -> Self {
        let half = t / lit(2.0);
        Self {
            e_half: (-p.b * half).exp(),
            drift_half: psi(p.b, half) * (p.a - p.sigma * p.sigma / lit(4.0)),
            scale: p.sigma * t.sqrt() / lit(2.0),
        }
    }

    /// Composition with a normalized increment `y` (the Brownian increment is `sqrt(t) y`).
    #[inline(always)]
    pub fn apply(&self, x: F, y: F) -> F {
        let inner = (self.e_half * x + self.drift_half).max(F::zero());
        let r = inner.sqrt() + self.scale * y;
        (self.e_half * r * r + self.drift_half).max(F::zero())
    }
}

/// Ninomiya-Victoir step `phi(x, t, sqrt(t) g)`.
pub fn nv_cir_step<F: Real>(x: F, t: F, gaussian: F, p: &CirParams<F>) -> Result<F> {
    p.check_low_vol("nv_cir_step")?;
    Ok(NvCoeffs::new(p, t).apply(x, gaussian))
}

/// Lower threshold above which `phi(x, t, sqrt(t) Y)` stays well defined for `|Y| <= a_y`.
pub fn threshold_k2<F: Real>(t: F, p: &CirParams<F>, a_y: F) -> F {
    if p.low_vol() {
        return F::zero();
    }
    let c = p.sigma * p.sigma / lit(4.0) - p.a;
    let e = (p.b * t / lit(2.0)).exp();
    let ps = psi(p.b, t / lit(2.0));
    let r = (e * c * ps).sqrt() + p.sigma / lit(2.0) * a_y * t.sqrt();
    e * (c * ps + r * r)
}

/// `delta_{j,L}(v) = C(L, j) prod_{q=j}^{L-1} (q + v)`.
pub fn delta_cir<F: Real>(j: usize, l: usize, v: F) -> F {
    assert!(j <= l);
    let mut binom = F::one();
    for i in 0..j {
        binom = binom * lit::<F>((l - i) as f64) / lit::<F>((i + 1) as f64);
    }
    let mut prod = F::one();
    for q in j..l {
        prod = prod * (lit::<F>(q as f64) + v);
    }
    binom * prod
}

/// Coefficients `delta_{j,L}(v)` for every `0 <= j <= L <= degree`.
#[derive(Clone, Debug)]
pub struct MomentTable<F> {
    pub degree: usize,
    pub v: F,
    rows: Vec<Vec<F>>,
}

impl<F: Real> MomentTable<F> {
    pub fn new(degree: usize, v: F) -> Self {
        let rows = (0..=degree)
            .map(|l| (0..=l).map(|j| delta_cir(j, l, v)).collect())
            .collect();
        Self { degree, v, rows }
    }

    pub fn get(&self, j: usize, l: usize) -> F {
        self.rows[l][j]
    }
}

/// `E[(X_t^x)^L]` in closed form.
pub fn moment_exact<F: Real>(l: usize, t: F, x: F, p: &CirParams<F>) -> F {
    let v = p.v();
    let scale = p.sigma * p.sigma * psi(p.b, t) / lit(2.0);
    let decay = (-p.b * t).exp() * x;
    (0..=l)
        .map(|j| delta_cir(j, l, v) * scale.powi((l - j) as i32) * decay.powi(j as i32))
        .fold(F::zero(), |acc, term| acc + term)
}

/// First two exact moments from precomputed per-step constants.
#[inline]
fn two_moments<F: Real>(x: F, e_bt: F, half_var: F, v: F) -> (F, F) {
    let d = e_bt * x;
    let m1 = v * half_var + d;
    let m2 = v * (v + F::one()) * half_var * half_var
        + lit::<F>(2.0) * (v + F::one()) * half_var * d
        + d * d;
    (m1, m2)
}

/// Weight `pi(t, x)` of the upper atom in the two-point moment-matching law.
pub fn pi_two_point<F: Real>(m1: F, m2: F) -> F {
    if m2 <= F::zero() {
        return F::zero();
    }
    let r = (F::one() - m1 * m1 / m2).max(F::zero());
    (F::one() - r.sqrt()) / lit(2.0)
}

pub const PHI_B_Z1: f64 = 2.7523451704710586;
pub const PHI_B_Z2: f64 = 3.5;
pub const PHI_B_C1: f64 = 2.58;
pub const PHI_B_C2: f64 = 3.106520327375868;

/// Truncated Gaussian used above the threshold by the second scheme.
#[inline]
pub fn phi_b_variable<F: Real>(n: F) -> F {
    let (z1, z2, c1, c2) = (lit::<F>(PHI_B_Z1), lit::<F>(PHI_B_Z2), lit::<F>(PHI_B_C1), lit::<F>(PHI_B_C2));
    if n <= -c2 {
        -z2
    } else if n <= -c1 {
        -z1
    } else if n <= c1 {
        n
    } else if n <= c2 {
        z1
    } else {
        z2
    }
}

/// Three-point variable (`-sqrt 3`, `0`, `sqrt 3` with weights 1/6, 2/3, 1/6) read off a Gaussian.
#[inline]
pub fn phi_a_variable<F: Real>(n: F, q_low: F, q_high: F) -> F {
    if n < q_low {
        -lit::<F>(3.0).sqrt()
    } else if n < q_high {
        F::zero()
    } else {
        lit::<F>(3.0).sqrt()
    }
}

/// Everything a single CIR step of length `t` needs, computed once per step size.
#[derive(Clone, Copy, Debug)]
pub struct CirStepCoeffs<F> {
    pub t: F,
    pub nv: NvCoeffs<F>,
    pub k2_a: F,
    pub k2_b: F,
    pub e_bt: F,
    pub half_var: F,
    pub v: F,
    /// `c_t = 4 / (sigma^2 psi_b(t))`.
    pub c: F,
    /// `d_t = c_t e^{-bt}`.
    pub d: F,
    q_low: F,
    q_high: F,
}

impl<F: Real> CirStepCoeffs<F> {
    pub fn new(p: &CirParams<F>, t: F) -> Self {
        let ps = psi(p.b, t);
        let s2 = p.sigma * p.sigma;
        let c = lit::<F>(4.0) / (s2 * ps);
        let e_bt = (-p.b * t).exp();
        Self {
            t,
            nv: NvCoeffs::new(p, t),
            k2_a: threshold_k2(t, p, lit::<F>(3.0).sqrt()),
            k2_b: threshold_k2(t, p, lit(PHI_B_Z2)),
            e_bt,
            half_var: s2 * ps / lit(2.0),
            v: p.v(),
            c,
            d: c * e_bt,
            q_low: lit(norm_inv(1.0 / 6.0)),
            q_high: lit(norm_inv(5.0 / 6.0)),
        }
    }

    #[inline]
    pub fn step_a(&self, x: F, n: F) -> F {
        if self.t <= F::zero() {
            return x;
        }
        if x >= self.k2_a {
            self.nv.apply(x, phi_a_variable(n, self.q_low, self.q_high))
        } else {
            let (m1, m2) = two_moments(x, self.e_bt, self.half_var, self.v);
            let pi = pi_two_point(m1, m2);
            if norm_cdf(n) < F::one() - pi {
                m1 / (lit::<F>(2.0) * (F::one() - pi))
            } else {
                m1 / (lit::<F>(2.0) * pi)
            }
        }
    }

    #[inline]
    pub fn step_b(&self, x: F, n: F) -> F {
        if self.t <= F::zero() {
            return x;
        }
        if x >= self.k2_b {
            self.nv.apply(x, phi_b_variable(n))
        } else {
            let (m1, m2) = two_moments(x, self.e_bt, self.half_var, self.v);
            let pi = pi_two_point(m1, m2);
            if pi <= F::zero() {
                return m1;
            }
            let two_pi = lit::<F>(2.0) * pi;
            m1 / two_pi * norm_cdf(n).powf(F::one() / two_pi - F::one())
        }
    }

    /// Exact transition draw through the Poisson mixture of Gamma laws.
    pub fn exact<R: Rng + ?Sized>(&self, x: F, rng: &mut R) -> F {
        if self.t <= F::zero() {
            return x;
        }
        let lam = to_f64(self.d * x) / 2.0;
        let i = poisson(lam, rng);
        let shape = i + to_f64(self.v);
        if shape <= 0.0 {
            return F::zero();
        }
        let scale = 2.0 / to_f64(self.c);
        lit(Gamma::new(shape, scale).expect("valid gamma").sample(rng))
    }

    /// First-order scheme `(2/c_t) Poisson(P + v)` with `P ~ Poisson(d_t x / 2)`.
    pub fn poisson_scheme<R: Rng + ?Sized>(&self, x: F, rng: &mut R) -> F {
        if self.t <= F::zero() {
            return x;
        }
        let p = poisson(to_f64(self.d * x) / 2.0, rng);
        let z = poisson(p + to_f64(self.v), rng);
        lit::<F>(2.0 * z) / self.c
    }
}

#[inline]
fn poisson<R: Rng + ?Sized>(lam: f64, rng: &mut R) -> f64 {
    if lam > 0.0 {
        Poisson::new(lam).expect("finite positive mean").sample(rng)
    } else {
        0.0
    }
}

/// Second-order step with the three-point variable above `K_2` and the two-point law below.
pub fn general_second_order_step_a<F: Real>(x: F, t: F, gaussian: F, p: &CirParams<F>) -> F {
    CirStepCoeffs::new(p, t).step_a(x, gaussian)
}

/// Second-order step with the truncated Gaussian above `K_2` and the scaled beta law below.
pub fn second_order_step_b<F: Real>(x: F, t: F, gaussian: F, p: &CirParams<F>) -> F {
    CirStepCoeffs::new(p, t).step_b(x, gaussian)
}

/// Draws `X_t` given `X_0 = x` from the exact transition law.
pub fn exact_cir_sample<F: Real, R: Rng + ?Sized>(t: F, x: F, p: &CirParams<F>, rng: &mut R) -> F {
    if t <= F::zero() {
        return x;
    }
    CirStepCoeffs::new(p, t).exact(x, rng)
}

pub fn poisson_first_order_step<F: Real, R: Rng + ?Sized>(x: F, t: F, p: &CirParams<F>, rng: &mut R) -> F {
    if t <= F::zero() {
        return x;
    }
    CirStepCoeffs::new(p, t).poisson_scheme(x, rng)
}

/// Ingredients of `E f(X_t) = f(0) + a psi(t) E[M f(X^1_t)] + e^{-bt} x E[M f(X^2_t)]`
/// with `M f(z) = (f(z) - f(0)) / z`.
#[derive(Clone, Copy, Debug)]
pub struct HighVolSplit<F> {
    pub f0: F,
    pub weight1: F,
    pub weight2: F,
    pub shifted1: CirParams<F>,
    pub shifted2: CirParams<F>,
}

impl<F: Real> HighVolSplit<F> {
    pub fn reassemble(&self, e1: F, e2: F) -> F {
        self.f0 + self.weight1 * e1 + self.weight2 * e2
    }
}

pub fn high_vol_split<F: Real>(f: impl Fn(F) -> F, t: F, x: F, p: &CirParams<F>) -> HighVolSplit<F> {
    let s2 = p.sigma * p.sigma;
    HighVolSplit {
        f0: f(F::zero()),
        weight1: p.a * psi(p.b, t),
        weight2: (-p.b * t).exp() * x,
        shifted1: p.with_start(x).with_a(p.a + s2 / lit(2.0)),
        shifted2: p.with_start(x).with_a(p.a + s2),
    }
}

/// `(f(z) - f0) / z`, with a one-sided difference quotient at `z = 0`.
pub fn divided_difference<F: Real>(f: impl Fn(F) -> F, f0: F, z: F) -> F {
    if z > F::zero() {
        (f(z) - f0) / z
    } else {
        let h = lit::<F>(1e-6);
        (f(h) - f0) / h
    }
}

/// Which one-step CIR kernel a path uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CirSchemeKind {
    Nv,
    PhiA,
    PhiB,
    Exact,
    Poisson,
}

/// Path noise: a Gaussian for the splitting schemes, the drawn value for the sampled ones.
#[derive(Clone, Copy, Debug, Default)]
pub struct CirNoise<F> {
    pub g: F,
    pub next: F,
}

#[derive(Clone, Copy, Debug)]
pub struct CirScheme<F> {
    pub params: CirParams<F>,
    pub kind: CirSchemeKind,
}

impl<F: Real> CirScheme<F> {
    pub fn new(params: CirParams<F>, kind: CirSchemeKind) -> Result<Self> {
        if kind == CirSchemeKind::Nv {
            params.check_low_vol("NV scheme")?;
        }
        Ok(Self { params, kind })
    }

    fn sampled(&self) -> bool {
        matches!(self.kind, CirSchemeKind::Exact | CirSchemeKind::Poisson)
    }
}

impl<F: Real> GridScheme<F> for CirScheme<F> {
    type State = F;
    type Noise = CirNoise<F>;
    type Coeffs = CirStepCoeffs<F>;

    fn start(&self) -> F {
        self.params.x0
    }

    fn coeffs(&self, h: F) -> CirStepCoeffs<F> {
        CirStepCoeffs::new(&self.params, h)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> CirNoise<F> {
        let g: f64 = rng.sample(rand_distr::StandardNormal);
        CirNoise { g: lit(g), next: F::zero() }
    }

    fn draw_leaves<R: Rng + ?Sized>(&self, leaves: &[&CirStepCoeffs<F>], rng: &mut R, out: &mut Vec<CirNoise<F>>) {
        if !self.sampled() {
            out.extend(leaves.iter().map(|_| self.draw(rng)));
            return;
        }
        let mut x = self.params.x0;
        for c in leaves {
            x = match self.kind {
                CirSchemeKind::Exact => c.exact(x, rng),
                _ => c.poisson_scheme(x, rng),
            };
            out.push(CirNoise { g: F::zero(), next: x });
        }
    }

    #[inline]
    fn step(&self, c: &CirStepCoeffs<F>, x: &F, noise: &CirNoise<F>) -> F {
        match self.kind {
            CirSchemeKind::Nv => c.nv.apply(*x, noise.g),
            CirSchemeKind::PhiA => c.step_a(*x, noise.g),
            CirSchemeKind::PhiB => c.step_b(*x, noise.g),
            CirSchemeKind::Exact | CirSchemeKind::Poisson => noise.next,
        }
    }

    fn couple(&self, _coupling: Coupling, path: &[F], fine: &[CirNoise<F>], _fresh: &CirNoise<F>) -> CirNoise<F> {
        let m = lit::<F>(fine.len() as f64);
        let g = fine.iter().fold(F::zero(), |acc, z| acc + z.g) / m.sqrt();
        CirNoise { g, next: *path.last().expect("non-empty fine path") }
    }

    fn supports_refinement(&self) -> bool {
        self.kind != CirSchemeKind::Poisson
    }
}
