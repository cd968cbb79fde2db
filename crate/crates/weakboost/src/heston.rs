//! Second-order steps for the log-Heston pair `(X, Y)` with an optional running integral of `e^X`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::cir::{CirParams, CirStepCoeffs};
use crate::error::{Error, Result};
use crate::grids::{coupling_standard, coupling_vol_weighted, Coupling, GridScheme};
use crate::real::{lit, to_f64, Real};

/// Guard on `|x|` before exponentiating a log-price.
pub const EXP_GUARD: f64 = 700.0;

static RADICAND_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of negative variance radicands clamped to zero by the Bernoulli steps so far.
pub fn radicand_clamps() -> u64 {
    RADICAND_CLAMPS.load(Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HestonParams<F> {
    pub r: F,
    pub delta: F,
    pub rho: F,
    pub cir: CirParams<F>,
    pub x0: F,
}

impl<F: Real> HestonParams<F> {
    pub fn new(s0: F, r: F, delta: F, rho: F, cir: CirParams<F>) -> Result<Self> {
        if !(s0 > F::zero()) || !s0.is_finite() {
            return Err(Error::InvalidParameter(format!("spot must be positive, got {s0}")));
        }
        if !(rho.abs() < F::one()) {
            return Err(Error::InvalidParameter(format!("|rho| must be < 1, got {rho}")));
        }
        if !r.is_finite() || !delta.is_finite() {
            return Err(Error::InvalidParameter("rate and dividend must be finite".into()));
        }
        Ok(Self { r, delta, rho, cir, x0: s0.ln() })
    }

    pub fn s0(&self) -> F {
        self.x0.exp()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogHestonState<F> {
    pub x: F,
    pub y: F,
    /// Running trapezoidal approximation of `int_0^t e^{X_s} ds`.
    pub i: F,
}

/// Constants of one log-price step of length `h`.
#[derive(Clone, Copy, Debug)]
pub struct HestonCoeffs<F> {
    pub h: F,
    pub cir: CirStepCoeffs<F>,
    drift: F,
    slope: F,
    mean_rev: F,
    var_half: F,
    var_full: F,
}

impl<F: Real> HestonCoeffs<F> {
    pub fn new(p: &HestonParams<F>, h: F) -> Self {
        let c = &p.cir;
        let k = p.rho / c.sigma;
        let one_minus = F::one() - p.rho * p.rho;
        Self {
            h,
            cir: CirStepCoeffs::new(c, h),
            drift: (p.r - p.delta - k * c.a) * h,
            slope: k,
            mean_rev: (k * c.b - lit(0.5)) * h / lit(2.0),
            var_half: one_minus * h / lit(2.0),
            var_full: one_minus * h,
        }
    }

    /// Log-price update given both ends of the variance and the radicand of the Gaussian term.
    #[inline(always)]
    pub(crate) fn x_next(&self, x: F, y: F, y_next: F, radicand: F, n: F) -> F {
        x + self.drift + self.slope * (y_next - y) + self.mean_rev * (y + y_next) + radicand.sqrt() * n
    }

    #[inline(always)]
    pub(crate) fn strang_radicand(&self, y: F, y_next: F) -> F {
        self.var_half * (y + y_next)
    }

    #[inline(always)]
    fn bernoulli_radicand(&self, y: F, y_next: F, b: bool) -> F {
        let v = if b { y_next } else { y };
        let rad = self.var_full * v;
        if rad < F::zero() {
            RADICAND_CLAMPS.fetch_add(1, Ordering::Relaxed);
            F::zero()
        } else {
            rad
        }
    }
}

/// Log-price step driven by the exact variance endpoint `y_next`.
pub fn ex_step<F: Real>(s: &LogHestonState<F>, t: F, n: F, y_next: F, p: &HestonParams<F>) -> LogHestonState<F> {
    let c = HestonCoeffs::new(p, t);
    let x = c.x_next(s.x, s.y, y_next, c.strang_radicand(s.y, y_next), n);
    LogHestonState { x, y: y_next, i: s.i }
}

/// Ninomiya-Victoir variance step followed by the matching log-price step.
pub fn nv_step<F: Real>(s: &LogHestonState<F>, t: F, n: F, g: F, p: &HestonParams<F>) -> Result<LogHestonState<F>> {
    p.cir.check_low_vol("nv_step")?;
    let c = HestonCoeffs::new(p, t);
    let y_next = c.cir.nv.apply(s.y, g);
    let x = c.x_next(s.x, s.y, y_next, c.strang_radicand(s.y, y_next), n);
    Ok(LogHestonState { x, y: y_next, i: s.i })
}

/// Variant whose Gaussian variance uses `y` or `y_next` according to a fair coin `b`.
pub fn bernoulli_step<F: Real>(
    s: &LogHestonState<F>,
    t: F,
    n: F,
    b: bool,
    y_next: F,
    p: &HestonParams<F>,
) -> LogHestonState<F> {
    let c = HestonCoeffs::new(p, t);
    let x = c.x_next(s.x, s.y, y_next, c.bernoulli_radicand(s.y, y_next, b), n);
    LogHestonState { x, y: y_next, i: s.i }
}

/// Trapezoidal update of the running integral of `e^x`.
pub fn asian_update<F: Real>(i: F, x_prev: F, x_new: F, dt: F) -> Result<F> {
    for x in [x_prev, x_new] {
        if !(x.abs() <= lit(EXP_GUARD)) {
            return Err(Error::Overflow { x: to_f64(x) });
        }
    }
    Ok(i + (x_prev.exp() + x_new.exp()) / lit(2.0) * dt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HestonKind {
    Nv,
    Ex,
    BernoulliNv,
    BernoulliEx,
}

impl HestonKind {
    fn exact_variance(self) -> bool {
        matches!(self, HestonKind::Ex | HestonKind::BernoulliEx)
    }

    fn bernoulli(self) -> bool {
        matches!(self, HestonKind::BernoulliNv | HestonKind::BernoulliEx)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct HestonNoise<F> {
    pub n: F,
    pub g: F,
    pub b: bool,
    pub y_next: F,
}

#[derive(Clone, Copy, Debug)]
pub struct HestonScheme<F> {
    pub params: HestonParams<F>,
    pub kind: HestonKind,
    pub asian: bool,
}

impl<F: Real> HestonScheme<F> {
    pub fn new(params: HestonParams<F>, kind: HestonKind, asian: bool) -> Result<Self> {
        if matches!(kind, HestonKind::Nv | HestonKind::BernoulliNv) {
            params.cir.check_low_vol("NV log-Heston scheme")?;
        }
        Ok(Self { params, kind, asian })
    }

    fn radicand(&self, c: &HestonCoeffs<F>, y: F, y_next: F, b: bool) -> F {
        if self.kind.bernoulli() {
            c.bernoulli_radicand(y, y_next, b)
        } else {
            c.strang_radicand(y, y_next)
        }
    }
}

impl<F: Real> GridScheme<F> for HestonScheme<F> {
    type State = LogHestonState<F>;
    type Noise = HestonNoise<F>;
    type Coeffs = HestonCoeffs<F>;

    fn start(&self) -> LogHestonState<F> {
        LogHestonState { x: self.params.x0, y: self.params.cir.x0, i: F::zero() }
    }

    fn coeffs(&self, h: F) -> HestonCoeffs<F> {
        HestonCoeffs::new(&self.params, h)
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> HestonNoise<F> {
        let n: f64 = rng.sample(StandardNormal);
        let g: f64 = if self.kind.exact_variance() { 0.0 } else { rng.sample(StandardNormal) };
        let b = if self.kind.bernoulli() { rng.random::<bool>() } else { false };
        HestonNoise { n: lit(n), g: lit(g), b, y_next: F::zero() }
    }

    fn draw_leaves<R: Rng + ?Sized>(&self, leaves: &[&HestonCoeffs<F>], rng: &mut R, out: &mut Vec<HestonNoise<F>>) {
        if !self.kind.exact_variance() {
            out.extend(leaves.iter().map(|_| self.draw(rng)));
            return;
        }
        let mut y = self.params.cir.x0;
        for c in leaves {
            let mut z = self.draw(rng);
            y = c.cir.exact(y, rng);
            z.y_next = y;
            out.push(z);
        }
    }

    #[inline]
    fn step(&self, c: &HestonCoeffs<F>, s: &LogHestonState<F>, z: &HestonNoise<F>) -> LogHestonState<F> {
        let y_next = if self.kind.exact_variance() { z.y_next } else { c.cir.nv.apply(s.y, z.g) };
        let x = c.x_next(s.x, s.y, y_next, self.radicand(c, s.y, y_next, z.b), z.n);
        let i = if self.asian {
            // Paths beyond the guard are reported as non-finite by the estimator.
            if x.abs() > lit(EXP_GUARD) || s.x.abs() > lit(EXP_GUARD) {
                F::nan()
            } else {
                s.i + (s.x.exp() + x.exp()) / lit(2.0) * c.h
            }
        } else {
            s.i
        };
        LogHestonState { x, y: y_next, i }
    }

    fn couple(
        &self,
        coupling: Coupling,
        path: &[LogHestonState<F>],
        fine: &[HestonNoise<F>],
        fresh: &HestonNoise<F>,
    ) -> HestonNoise<F> {
        if fine.len() == 1 {
            return fine[0];
        }
        let ns: Vec<F> = fine.iter().map(|z| z.n).collect();
        let n = match coupling {
            Coupling::Standard => coupling_standard(&ns),
            Coupling::VolatilityWeighted => {
                let w: Vec<F> = path
                    .windows(2)
                    .zip(fine)
                    .map(|(s, z)| {
                        if self.kind.bernoulli() {
                            if z.b {
                                s[1].y
                            } else {
                                s[0].y
                            }
                        } else {
                            s[0].y + s[1].y
                        }
                    })
                    .collect();
                coupling_vol_weighted(&ns, &w)
            }
        };
        let gs: Vec<F> = fine.iter().map(|z| z.g).collect();
        HestonNoise {
            n,
            g: coupling_standard(&gs),
            b: fresh.b,
            y_next: path.last().expect("non-empty fine path").y,
        }
    }
}
