//! Multifactor Heston model with kernel `K(t) = sum_k gamma_k e^{-rho_k t}`.
//!
//! The variance is `y + sum_k gamma_k Y^k` where every factor `Y^k` starts at 0.

use rand::Rng;

use crate::cir::CirParams;
use crate::error::{Error, Result};
use crate::grids::{Coupling, GridScheme};
use crate::heston::{HestonCoeffs, HestonNoise, HestonParams};
use crate::real::{lit, to_f64, Real};

/// Largest supported number of factors.
pub const MAX_FACTORS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct KernelNodes<F> {
    pub gammas: Vec<F>,
    pub rhos: Vec<F>,
}

impl<F: Real> KernelNodes<F> {
    pub fn new(gammas: Vec<F>, rhos: Vec<F>) -> Result<Self> {
        if gammas.len() != rhos.len() || gammas.is_empty() || gammas.len() > MAX_FACTORS {
            return Err(Error::InvalidParameter(format!(
                "kernel needs 1..={MAX_FACTORS} matching weights and nodes"
            )));
        }
        if gammas.iter().chain(&rhos).any(|v| !(*v >= F::zero()) || !v.is_finite()) {
            return Err(Error::InvalidParameter("kernel weights and nodes must be finite and >= 0".into()));
        }
        let nodes = Self { gammas, rhos };
        if !(nodes.k0() > F::zero()) {
            return Err(Error::InvalidParameter("kernel must be positive at 0".into()));
        }
        Ok(nodes)
    }

    /// Three-factor approximation of the fractional kernel with Hurst index 0.1.
    pub fn bl2() -> Self {
        Self {
            gammas: [0.80386099, 1.60786461, 8.80775525].map(lit).to_vec(),
            rhos: [0.08399474, 5.64850577, 118.00624702].map(lit).to_vec(),
        }
    }

    /// Parses `k,rho,gamma` rows, with an optional header line.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut gammas = Vec::new();
        let mut rhos = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || (ln == 0 && line.starts_with('k')) {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::InvalidParameter(format!("bad kernel row {}: {line}", ln + 1));
            if cols.len() != 3 {
                return Err(bad());
            }
            let rho: f64 = cols[1].parse().map_err(|_| bad())?;
            let gamma: f64 = cols[2].parse().map_err(|_| bad())?;
            rhos.push(lit(rho));
            gammas.push(lit(gamma));
        }
        Self::new(gammas, rhos)
    }

    pub fn d(&self) -> usize {
        self.gammas.len()
    }

    /// `K(0) = sum_k gamma_k`.
    pub fn k0(&self) -> F {
        self.gammas.iter().fold(F::zero(), |acc, &g| acc + g)
    }

    pub fn eval(&self, t: F) -> F {
        self.gammas
            .iter()
            .zip(&self.rhos)
            .fold(F::zero(), |acc, (&g, &r)| acc + g * (-r * t).exp())
    }
}

pub fn kernel_eval<F: Real>(nodes: &KernelNodes<F>, t: F) -> F {
    nodes.eval(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MfState<F> {
    pub x: F,
    pub factors: [F; MAX_FACTORS],
}

impl<F: Real> MfState<F> {
    pub fn new(x: F) -> Self {
        Self { x, factors: [F::zero(); MAX_FACTORS] }
    }

    /// `y + sum_k gamma_k Y^k`.
    pub fn variance(&self, y_level: F, nodes: &KernelNodes<F>) -> F {
        nodes
            .gammas
            .iter()
            .zip(&self.factors)
            .fold(y_level, |acc, (&g, &f)| acc + g * f)
    }
}

/// Exact flow of `dY^k = -rho_k Y^k dt`.
pub fn psi1_flow<F: Real>(t: F, s: &MfState<F>, nodes: &KernelNodes<F>) -> MfState<F> {
    let mut out = *s;
    for (f, &r) in out.factors.iter_mut().zip(&nodes.rhos) {
        *f = *f * (-r * t).exp();
    }
    out
}

/// Shifts every factor by `(after - before) / K(0)`.
pub fn remap_ay<F: Real>(s: &MfState<F>, before: F, after: F, nodes: &KernelNodes<F>) -> [F; MAX_FACTORS] {
    let shift = (after - before) / nodes.k0();
    let mut out = s.factors;
    for f in out.iter_mut().take(nodes.d()) {
        *f = *f + shift;
    }
    out
}

/// Model parameters: `heston.cir` holds `(a, b, sigma)` and the level `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct MfParams<F> {
    pub heston: HestonParams<F>,
    pub nodes: KernelNodes<F>,
}

impl<F: Real> MfParams<F> {
    pub fn new(heston: HestonParams<F>, nodes: KernelNodes<F>) -> Result<Self> {
        let p = Self { heston, nodes };
        p.check_regime()?;
        Ok(p)
    }

    pub fn check_regime(&self) -> Result<()> {
        let c = &self.heston.cir;
        let lhs = self.nodes.k0() * c.sigma * c.sigma;
        let rhs = lit::<F>(4.0) * c.a;
        if lhs < rhs {
            Ok(())
        } else {
            Err(Error::Regime { what: "multifactor NV scheme (K(0) sigma^2)", sigma2: to_f64(lhs), four_a: to_f64(rhs) })
        }
    }

    /// Log-Heston parameters of the frozen-kernel block: `(a, b, sigma)` scaled by `K(0)`.
    pub fn inner(&self) -> HestonParams<F> {
        let c = &self.heston.cir;
        let k0 = self.nodes.k0();
        HestonParams {
            cir: CirParams { a: c.a * k0, b: c.b * k0, sigma: c.sigma * k0, x0: c.x0 },
            ..self.heston
        }
    }

    pub fn start(&self) -> MfState<F> {
        MfState::new(self.heston.x0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MfCoeffs<F> {
    pub inner: HestonCoeffs<F>,
    decay_half: [F; MAX_FACTORS],
}

impl<F: Real> MfCoeffs<F> {
    pub fn new(p: &MfParams<F>, h: F) -> Self {
        let mut decay_half = [F::one(); MAX_FACTORS];
        for (d, &r) in decay_half.iter_mut().zip(&p.nodes.rhos) {
            *d = (-r * h / lit(2.0)).exp();
        }
        Self { inner: HestonCoeffs::new(&p.inner(), h), decay_half }
    }
}

#[inline]
fn step_with<F: Real>(p: &MfParams<F>, c: &MfCoeffs<F>, s: &MfState<F>, n: F, g: F) -> MfState<F> {
    let d = p.nodes.d();
    let mut f = s.factors;
    for k in 0..d {
        f[k] = f[k] * c.decay_half[k];
    }
    let mid = MfState { x: s.x, factors: f };
    let y_mid = mid.variance(p.heston.cir.x0, &p.nodes);
    let y_hat = c.inner.cir.nv.apply(y_mid, g);
    let x = c.inner.x_next(s.x, y_mid, y_hat, c.inner.strang_radicand(y_mid, y_hat), n);
    let mut f = remap_ay(&mid, y_mid, y_hat, &p.nodes);
    for k in 0..d {
        f[k] = f[k] * c.decay_half[k];
    }
    MfState { x, factors: f }
}

/// Strang step `psi1(t/2)`, log-Heston NV step on the aggregated variance, factor shift, `psi1(t/2)`.
pub fn mf_step<F: Real>(s: &MfState<F>, t: F, n: F, g: F, p: &MfParams<F>) -> Result<MfState<F>> {
    p.check_regime()?;
    Ok(step_with(p, &MfCoeffs::new(p, t), s, n, g))
}

#[derive(Clone, Debug)]
pub struct MfScheme<F> {
    pub params: MfParams<F>,
}

impl<F: Real> MfScheme<F> {
    pub fn new(params: MfParams<F>) -> Result<Self> {
        params.check_regime()?;
        Ok(Self { params })
    }
}

impl<F: Real> GridScheme<F> for MfScheme<F> {
    type State = MfState<F>;
    type Noise = HestonNoise<F>;
    type Coeffs = MfCoeffs<F>;

    fn start(&self) -> MfState<F> {
        self.params.start()
    }

    fn coeffs(&self, h: F) -> MfCoeffs<F> {
        MfCoeffs::new(&self.params, h)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> HestonNoise<F> {
        let n: f64 = rng.sample(rand_distr::StandardNormal);
        let g: f64 = rng.sample(rand_distr::StandardNormal);
        HestonNoise { n: lit(n), g: lit(g), b: false, y_next: F::zero() }
    }

    #[inline]
    fn step(&self, c: &MfCoeffs<F>, s: &MfState<F>, z: &HestonNoise<F>) -> MfState<F> {
        step_with(&self.params, c, s, z.n, z.g)
    }

    fn couple(&self, coupling: Coupling, path: &[MfState<F>], fine: &[HestonNoise<F>], _fresh: &HestonNoise<F>) -> HestonNoise<F> {
        if fine.len() == 1 {
            return fine[0];
        }
        let ns: Vec<F> = fine.iter().map(|z| z.n).collect();
        let gs: Vec<F> = fine.iter().map(|z| z.g).collect();
        let n = match coupling {
            Coupling::Standard => crate::grids::coupling_standard(&ns),
            Coupling::VolatilityWeighted => {
                let y = self.params.heston.cir.x0;
                let w: Vec<F> = path
                    .windows(2)
                    .map(|s| s[0].variance(y, &self.params.nodes) + s[1].variance(y, &self.params.nodes))
                    .collect();
                crate::grids::coupling_vol_weighted(&ns, &w)
            }
        };
        HestonNoise { n, g: crate::grids::coupling_standard(&gs), b: false, y_next: F::zero() }
    }
}
