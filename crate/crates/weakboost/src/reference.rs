//! Closed-form and Fourier reference values, plus the option payoffs.

use num_complex::Complex64 as C64;

use crate::cir::{psi, CirParams};
use crate::error::{Error, Result};
use crate::heston::HestonParams;
use crate::multifactor::KernelNodes;
use crate::quad::half_line;
use crate::real::{norm_cdf, to_f64, Real};

/// `E[e^{-lambda X_t}]` given `X_0 = x`.
pub fn cir_laplace<F: Real>(lambda: F, t: F, x: F, p: &CirParams<F>) -> F {
    let s2 = p.sigma * p.sigma;
    let q = F::one() + lambda * s2 * psi(p.b, t) / (F::one() + F::one());
    let v = (F::one() + F::one()) * p.a / s2;
    q.powf(-v) * (-lambda * x * (-p.b * t).exp() / q).exp()
}

/// European option description.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PutSpec {
    pub strike: f64,
    pub maturity: f64,
}

impl PutSpec {
    pub fn new(strike: f64, maturity: f64) -> Result<Self> {
        if !(strike > 0.0 && maturity > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "strike and maturity must be positive (K={strike}, T={maturity})"
            )));
        }
        Ok(Self { strike, maturity })
    }
}

/// `(K - e^x)^+`.
pub fn payoff_put<F: Real>(x_log: F, strike: F) -> F {
    (strike - x_log.exp()).max(F::zero())
}

/// `(K - i/T)^+`.
pub fn payoff_asian_put<F: Real>(i: F, maturity: F, strike: F) -> F {
    (strike - i / maturity).max(F::zero())
}

/// Black-Scholes put with total variance `var` over the life of the option.
pub fn black_scholes_put(s0: f64, strike: f64, r: f64, delta: f64, maturity: f64, var: f64) -> f64 {
    let fwd = s0 * ((r - delta) * maturity).exp();
    let disc = (-r * maturity).exp();
    if var <= 0.0 {
        return disc * (strike - fwd).max(0.0);
    }
    let sd = var.sqrt();
    let d1 = ((fwd / strike).ln() + var / 2.0) / sd;
    let d2 = d1 - sd;
    disc * (strike * norm_cdf(-d2) - fwd * norm_cdf(-d1))
}

/// Characteristic function of `ln(S_T / F_T)`, with `F_T` the forward.
pub trait ForwardCharFn {
    fn cf(&self, u: C64) -> C64;
}

/// Heston model, little-trap branch of the complex logarithm.
pub struct HestonCf {
    pub y0: f64,
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub rho: f64,
    pub maturity: f64,
}

impl ForwardCharFn for HestonCf {
    fn cf(&self, u: C64) -> C64 {
        let i = C64::new(0.0, 1.0);
        let s2 = self.sigma * self.sigma;
        let beta = self.b - self.rho * self.sigma * i * u;
        let d = (beta * beta + s2 * (i * u + u * u)).sqrt();
        let g = (beta - d) / (beta + d);
        let e = (-d * self.maturity).exp();
        let c = self.a / s2 * ((beta - d) * self.maturity - 2.0 * ((1.0 - g * e) / (1.0 - g)).ln());
        let dd = (beta - d) / s2 * (1.0 - e) / (1.0 - g * e);
        (c + dd * self.y0).exp()
    }
}

/// Multifactor Heston, by integrating the Riccati system of the affine transform.
pub struct MultifactorCf {
    pub y0: f64,
    pub a: f64,
    pub b: f64,
    pub sigma: f64,
    pub rho: f64,
    pub gammas: Vec<f64>,
    pub rhos: Vec<f64>,
    pub maturity: f64,
    pub steps: usize,
}

impl MultifactorCf {
    fn rhs(&self, w: C64, state: &[C64], out: &mut [C64]) {
        let d = self.gammas.len();
        let big: C64 = state[..d].iter().sum();
        let r = -w / 2.0 + w * w / 2.0 - self.b * big + self.rho * self.sigma * w * big
            + self.sigma * self.sigma * big * big / 2.0;
        for k in 0..d {
            out[k] = self.gammas[k] * r - self.rhos[k] * state[k];
        }
        out[d] = self.a * big + self.y0 * r;
    }
}

impl ForwardCharFn for MultifactorCf {
    fn cf(&self, u: C64) -> C64 {
        // E[e^{w X_T}] with w = iu, drift removed so the forward is the reference.
        let w = C64::new(0.0, 1.0) * u;
        let d = self.gammas.len();
        let h = self.maturity / self.steps as f64;
        let mut s = vec![C64::new(0.0, 0.0); d + 1];
        let (mut k1, mut k2, mut k3, mut k4) = (s.clone(), s.clone(), s.clone(), s.clone());
        let mut tmp = s.clone();
        for _ in 0..self.steps {
            self.rhs(w, &s, &mut k1);
            for j in 0..=d {
                tmp[j] = s[j] + k1[j] * (h / 2.0);
            }
            self.rhs(w, &tmp, &mut k2);
            for j in 0..=d {
                tmp[j] = s[j] + k2[j] * (h / 2.0);
            }
            self.rhs(w, &tmp, &mut k3);
            for j in 0..=d {
                tmp[j] = s[j] + k3[j] * h;
            }
            self.rhs(w, &tmp, &mut k4);
            for j in 0..=d {
                s[j] += (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]) * (h / 6.0);
            }
        }
        s[d].exp()
    }
}

/// Put price from a forward characteristic function, with a lognormal control of total
/// variance `control_var` to make the integrand decay fast.
pub fn fourier_put<C: ForwardCharFn>(
    cf: &C,
    s0: f64,
    r: f64,
    delta: f64,
    spec: &PutSpec,
    control_var: f64,
) -> Result<f64> {
    let t = spec.maturity;
    let fwd = s0 * ((r - delta) * t).exp();
    let k = (fwd / spec.strike).ln();
    let shift = C64::new(0.0, -0.5);
    let v = control_var.max(0.0);
    let integrand = |u: f64| {
        let z = C64::new(u, 0.0) + shift;
        let bs = (-(v / 2.0) * (C64::new(0.0, 1.0) * z + z * z)).exp();
        let diff = cf.cf(z) - bs;
        (C64::new(0.0, u * k).exp() * diff).re / (u * u + 0.25)
    };
    let width = 8.0 / (1.0 + v.sqrt());
    let integral = half_line(width, 1e-12, 1e-10, 20_000, integrand)?;
    let disc = (-r * t).exp();
    // Call through the Lewis representation, put by parity.
    let bs_call = black_scholes_put(s0, spec.strike, r, delta, t, v) + s0 * (-delta * t).exp() - spec.strike * disc;
    let call = bs_call - disc * (fwd * spec.strike).sqrt() / std::f64::consts::PI * integral;
    let put = call - s0 * (-delta * t).exp() + spec.strike * disc;
    if !put.is_finite() {
        return Err(Error::Integration(format!("non-finite price {put}")));
    }
    Ok(put.max(0.0))
}

/// Expected integrated variance `int_0^T E[Y_s] ds`.
pub fn mean_integrated_variance(y0: f64, a: f64, b: f64, t: f64) -> f64 {
    if b.abs() < 1e-12 {
        y0 * t + a * t * t / 2.0
    } else {
        a / b * t + (y0 - a / b) * psi(b, t)
    }
}

/// European put in the Heston model.
pub fn heston_put_fourier<F: Real>(p: &HestonParams<F>, spec: &PutSpec) -> Result<f64> {
    let c = &p.cir;
    let cf = HestonCf {
        y0: to_f64(c.x0),
        a: to_f64(c.a),
        b: to_f64(c.b),
        sigma: to_f64(c.sigma),
        rho: to_f64(p.rho),
        maturity: spec.maturity,
    };
    let var = mean_integrated_variance(cf.y0, cf.a, cf.b, spec.maturity);
    fourier_put(&cf, to_f64(p.s0()), to_f64(p.r), to_f64(p.delta), spec, var)
}

/// European put in the multifactor model whose variance starts at `p.cir.x0`.
pub fn multifactor_put_fourier<F: Real>(p: &HestonParams<F>, nodes: &KernelNodes<F>, spec: &PutSpec, steps: usize) -> Result<f64> {
    let c = &p.cir;
    let cf = MultifactorCf {
        y0: to_f64(c.x0),
        a: to_f64(c.a),
        b: to_f64(c.b),
        sigma: to_f64(c.sigma),
        rho: to_f64(p.rho),
        gammas: nodes.gammas.iter().map(|&g| to_f64(g)).collect(),
        rhos: nodes.rhos.iter().map(|&r| to_f64(r)).collect(),
        maturity: spec.maturity,
        steps,
    };
    let var = to_f64(c.x0) * spec.maturity;
    fourier_put(&cf, to_f64(p.s0()), to_f64(p.r), to_f64(p.delta), spec, var)
}
