//! Random refinement grids and the boosted estimators built on them.
//!
//! A scheme on `n` uniform steps of size `h1 = T/n` is compared with the same scheme on a grid
//! where one step `kappa` is cut into `n` steps of size `h2 = T/n^2` (and, for the third level,
//! one of those into `n` steps of size `h3 = T/n^3`). Paths share their noise outside the refined
//! steps. Inside a refined step the coarser path consumes an aggregate of the finer noises.

use std::fmt::Debug;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::engine::{parallel_chunks, reposition, sample_rng, stream_id, Estimate, Welford, Welford2};
use crate::error::{Error, Result};
use crate::real::{lit, to_f64, Real};

/// How the fine noises of a refined step are combined into the coarse step noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Coupling {
    #[default]
    Standard,
    VolatilityWeighted,
}

/// Interface the grid machinery needs from a one-step scheme.
pub trait GridScheme<F: Real>: Sync {
    type State: Copy + Send + Sync + Debug;
    type Noise: Copy + Send + Sync + Debug + Default;
    type Coeffs: Send + Sync;

    fn start(&self) -> Self::State;

    /// Step-size dependent constants.
    fn coeffs(&self, h: F) -> Self::Coeffs;

    /// Fresh noise for one step, used for the extra randomness of a coupled coarse step.
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Self::Noise;

    /// Noises for a run of consecutive steps, in time order from `start()`.
    fn draw_leaves<R: Rng + ?Sized>(&self, leaves: &[&Self::Coeffs], rng: &mut R, out: &mut Vec<Self::Noise>) {
        out.extend(leaves.iter().map(|_| self.draw(rng)));
    }

    fn step(&self, c: &Self::Coeffs, s: &Self::State, noise: &Self::Noise) -> Self::State;

    /// Noise of one coarse step built from the fine path `path` (`fine.len() + 1` states)
    /// and the fine noises that produced it.
    fn couple(&self, coupling: Coupling, path: &[Self::State], fine: &[Self::Noise], fresh: &Self::Noise) -> Self::Noise;

    fn supports_refinement(&self) -> bool {
        true
    }
}

/// `N^st = sum N_k / sqrt(n)`.
pub fn coupling_standard<F: Real>(fine: &[F]) -> F {
    if fine.len() == 1 {
        return fine[0];
    }
    let m = lit::<F>(fine.len() as f64);
    fine.iter().fold(F::zero(), |acc, &z| acc + z) / m.sqrt()
}

/// `N^av = sum sqrt(w_k) N_k / sqrt(sum w_k)`, falling back to `N^st` when every weight is zero.
pub fn coupling_vol_weighted<F: Real>(fine: &[F], weights: &[F]) -> F {
    assert_eq!(fine.len(), weights.len());
    if fine.len() == 1 {
        return fine[0];
    }
    let total = weights.iter().fold(F::zero(), |acc, &w| acc + w.max(F::zero()));
    if total <= F::zero() {
        return coupling_standard(fine);
    }
    let num = fine
        .iter()
        .zip(weights)
        .fold(F::zero(), |acc, (&z, &w)| acc + w.max(F::zero()).sqrt() * z);
    num / total.sqrt()
}

/// Random grid of one boosted sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPlan {
    pub n: usize,
    pub level: u8,
    pub kappa: Option<usize>,
    pub kappa_prime: Option<usize>,
    pub pair: Option<(usize, usize)>,
}

impl GridPlan {
    pub fn uniform(n: usize) -> Self {
        Self { n, level: 1, kappa: None, kappa_prime: None, pair: None }
    }

    pub fn validate(&self) -> Result<()> {
        let inside = |k: Option<usize>| k.is_none_or(|k| k < self.n);
        let shape = match self.level {
            1 => self.kappa.is_none() && self.kappa_prime.is_none() && self.pair.is_none(),
            2 => self.kappa.is_some() && self.kappa_prime.is_none() && self.pair.is_none(),
            3 => self.kappa.is_some() && self.kappa_prime.is_some() && (self.pair.is_some() == (self.n > 1)),
            _ => false,
        };
        let pair_ok = self.pair.is_none_or(|(a, b)| a < b && b < self.n);
        if self.n == 0 || !shape || !inside(self.kappa) || !inside(self.kappa_prime) || !pair_ok {
            return Err(Error::InvalidParameter(format!("malformed grid plan {self:?}")));
        }
        Ok(())
    }

    /// Time points of the grid with step `kappa` refined, for `maturity`.
    pub fn refined_times(&self, maturity: f64) -> Vec<f64> {
        let h1 = maturity / self.n as f64;
        let mut t = vec![0.0];
        for k in 0..self.n {
            if Some(k) == self.kappa {
                for j in 1..=self.n {
                    t.push(k as f64 * h1 + j as f64 * h1 / self.n as f64);
                }
            } else {
                t.push((k + 1) as f64 * h1);
            }
        }
        t
    }
}

/// Number of strictly ordered pairs in `{0..n-1}`.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

pub fn draw_grid<R: Rng + ?Sized>(n: usize, level: u8, rng: &mut R) -> Result<GridPlan> {
    if n == 0 {
        return Err(Error::InvalidParameter("grid needs n >= 1".into()));
    }
    let plan = match level {
        1 => GridPlan::uniform(n),
        2 => GridPlan { n, level, kappa: Some(rng.random_range(0..n)), kappa_prime: None, pair: None },
        3 => {
            let kappa = rng.random_range(0..n);
            let kappa_prime = rng.random_range(0..n);
            let pair = if n > 1 {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                Some((i.min(j), i.max(j)))
            } else {
                None
            };
            GridPlan { n, level, kappa: Some(kappa), kappa_prime: Some(kappa_prime), pair }
        }
        _ => return Err(Error::InvalidParameter(format!("boost level {level} not in 1..=3"))),
    };
    Ok(plan)
}

/// Coefficients for the three step sizes `T/n`, `T/n^2`, `T/n^3`.
pub struct LevelCoeffs<C> {
    pub n: usize,
    pub c1: C,
    pub c2: C,
    pub c3: C,
}

impl<C> LevelCoeffs<C> {
    pub fn new<F: Real, S: GridScheme<F, Coeffs = C>>(scheme: &S, maturity: F, n: usize) -> Self {
        let nf = lit::<F>(n as f64);
        let h1 = maturity / nf;
        let h2 = h1 / nf;
        Self { n, c1: scheme.coeffs(h1), c2: scheme.coeffs(h2), c3: scheme.coeffs(h2 / nf) }
    }
}

/// Reusable buffers for one worker.
pub struct Scratch<F: Real, S: GridScheme<F>> {
    noises: Vec<S::Noise>,
    path: Vec<S::State>,
}

impl<F: Real, S: GridScheme<F>> Default for Scratch<F, S> {
    fn default() -> Self {
        Self { noises: Vec::new(), path: Vec::new() }
    }
}

/// Terminal state of the scheme on the uniform grid.
pub fn simulate_uniform<F: Real, S: GridScheme<F>, R: Rng + ?Sized>(
    scheme: &S,
    lc: &LevelCoeffs<S::Coeffs>,
    rng: &mut R,
    scratch: &mut Scratch<F, S>,
) -> S::State {
    let leaves: Vec<&S::Coeffs> = vec![&lc.c1; lc.n];
    scratch.noises.clear();
    scheme.draw_leaves(&leaves, rng, &mut scratch.noises);
    scratch.noises.iter().fold(scheme.start(), |s, z| scheme.step(&lc.c1, &s, z))
}

/// Coarse and refined terminal states for a given `kappa` and frozen noise.
///
/// `leaves` holds the `kappa` coarse noises before the refined step, the `n` fine noises
/// inside it and the `n - kappa - 1` coarse noises after it.
pub fn simulate_level2_with<F: Real, S: GridScheme<F>>(
    scheme: &S,
    lc: &LevelCoeffs<S::Coeffs>,
    kappa: usize,
    coupling: Coupling,
    leaves: &[S::Noise],
    fresh: &S::Noise,
    path: &mut Vec<S::State>,
) -> (S::State, S::State) {
    let n = lc.n;
    debug_assert_eq!(leaves.len(), 2 * n - 1);
    let mut s = scheme.start();
    for z in &leaves[..kappa] {
        s = scheme.step(&lc.c1, &s, z);
    }
    let fine = &leaves[kappa..kappa + n];
    path.clear();
    path.push(s);
    let mut f = s;
    for z in fine {
        f = scheme.step(&lc.c2, &f, z);
        path.push(f);
    }
    let nz = scheme.couple(coupling, path, fine, fresh);
    let mut c = scheme.step(&lc.c1, &s, &nz);
    for z in &leaves[kappa + n..] {
        c = scheme.step(&lc.c1, &c, z);
        f = scheme.step(&lc.c1, &f, z);
    }
    (c, f)
}

/// Draws the noise of a level-2 plan and returns `(coarse, refined)` terminal states.
pub fn simulate_level2<F: Real, S: GridScheme<F>, R: Rng + ?Sized>(
    scheme: &S,
    lc: &LevelCoeffs<S::Coeffs>,
    kappa: usize,
    coupling: Coupling,
    rng: &mut R,
    scratch: &mut Scratch<F, S>,
) -> (S::State, S::State) {
    let n = lc.n;
    let mut leaves: Vec<&S::Coeffs> = Vec::with_capacity(2 * n - 1);
    leaves.extend(std::iter::repeat_n(&lc.c1, kappa));
    leaves.extend(std::iter::repeat_n(&lc.c2, n));
    leaves.extend(std::iter::repeat_n(&lc.c1, n - kappa - 1));
    scratch.noises.clear();
    scheme.draw_leaves(&leaves, rng, &mut scratch.noises);
    let fresh = scheme.draw(rng);
    simulate_level2_with(scheme, lc, kappa, coupling, &scratch.noises, &fresh, &mut scratch.path)
}

/// Union of refinements: refined coarse steps and an optional refined fine step `(k, j)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Refinement {
    pub coarse: Vec<usize>,
    pub sub: Option<(usize, usize)>,
}

impl Refinement {
    pub fn new(mut coarse: Vec<usize>, sub: Option<(usize, usize)>) -> Self {
        coarse.sort_unstable();
        coarse.dedup();
        if let Some((k, _)) = sub {
            assert!(coarse.contains(&k), "refined fine step must lie in a refined coarse step");
        }
        Self { coarse, sub }
    }

    /// Step sizes of the union grid in time order: 1, 2 or 3 for `h1`, `h2`, `h3`.
    pub fn leaf_levels(&self, n: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for k in 0..n {
            if self.coarse.contains(&k) {
                for j in 0..n {
                    if self.sub == Some((k, j)) {
                        out.extend(std::iter::repeat_n(3u8, n));
                    } else {
                        out.push(2);
                    }
                }
            } else {
                out.push(1);
            }
        }
        out
    }
}

/// One of the nested schemes of a sample: which refined steps it actually walks through.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct SchemeSet {
    pub coarse: Vec<usize>,
    pub sub: bool,
}

/// Frozen noise on a union grid, with one fresh noise per internal node.
pub struct Tree<'a, F: Real, S: GridScheme<F>> {
    scheme: &'a S,
    lc: &'a LevelCoeffs<S::Coeffs>,
    coupling: Coupling,
    refinement: Refinement,
    coarse_leaf: Vec<S::Noise>,
    fine_leaf: Vec<Vec<S::Noise>>,
    finer_leaf: Vec<S::Noise>,
    fresh_coarse: Vec<S::Noise>,
    fresh_fine: S::Noise,
}

impl<'a, F: Real, S: GridScheme<F>> Tree<'a, F, S> {
    /// Builds the tree from noises listed in union-grid time order followed by the fresh noises
    /// (one per refined coarse step in increasing order, then one for the refined fine step).
    pub fn from_noises(
        scheme: &'a S,
        lc: &'a LevelCoeffs<S::Coeffs>,
        coupling: Coupling,
        refinement: Refinement,
        leaves: &[S::Noise],
        fresh: &[S::Noise],
    ) -> Self {
        let n = lc.n;
        let mut it = leaves.iter().copied();
        let mut coarse_leaf = vec![S::Noise::default(); n];
        let mut fine_leaf = vec![Vec::with_capacity(n); refinement.coarse.len()];
        let mut finer_leaf = Vec::new();
        for (k, slot) in coarse_leaf.iter_mut().enumerate() {
            if let Some(r) = refinement.coarse.iter().position(|&c| c == k) {
                for j in 0..n {
                    if refinement.sub == Some((k, j)) {
                        finer_leaf.extend(it.by_ref().take(n));
                        fine_leaf[r].push(S::Noise::default());
                    } else {
                        fine_leaf[r].push(it.next().expect("leaf count"));
                    }
                }
            } else {
                *slot = it.next().expect("leaf count");
            }
        }
        assert!(it.next().is_none(), "too many leaf noises");
        let fresh_coarse = fresh[..refinement.coarse.len()].to_vec();
        let fresh_fine = if refinement.sub.is_some() { fresh[refinement.coarse.len()] } else { S::Noise::default() };
        Self { scheme, lc, coupling, refinement, coarse_leaf, fine_leaf, finer_leaf, fresh_coarse, fresh_fine }
    }

    pub fn draw<R: Rng + ?Sized>(
        scheme: &'a S,
        lc: &'a LevelCoeffs<S::Coeffs>,
        coupling: Coupling,
        refinement: Refinement,
        rng: &mut R,
    ) -> Self {
        let levels = refinement.leaf_levels(lc.n);
        let coeffs: Vec<&S::Coeffs> = levels
            .iter()
            .map(|l| match l {
                1 => &lc.c1,
                2 => &lc.c2,
                _ => &lc.c3,
            })
            .collect();
        let mut leaves = Vec::with_capacity(coeffs.len());
        scheme.draw_leaves(&coeffs, rng, &mut leaves);
        let count = refinement.coarse.len() + usize::from(refinement.sub.is_some());
        let fresh: Vec<S::Noise> = (0..count).map(|_| scheme.draw(rng)).collect();
        Self::from_noises(scheme, lc, coupling, refinement, &leaves, &fresh)
    }

    fn slot(&self, k: usize) -> Option<usize> {
        self.refinement.coarse.iter().position(|&c| c == k)
    }

    fn noise_fine(&self, k: usize, j: usize, s: &S::State) -> S::Noise {
        if self.refinement.sub == Some((k, j)) {
            let mut path = Vec::with_capacity(self.lc.n + 1);
            path.push(*s);
            let mut cur = *s;
            for z in &self.finer_leaf {
                cur = self.scheme.step(&self.lc.c3, &cur, z);
                path.push(cur);
            }
            self.scheme.couple(self.coupling, &path, &self.finer_leaf, &self.fresh_fine)
        } else {
            self.fine_leaf[self.slot(k).expect("refined step")][j]
        }
    }

    fn noise_coarse(&self, k: usize, s: &S::State) -> S::Noise {
        let Some(r) = self.slot(k) else {
            return self.coarse_leaf[k];
        };
        let n = self.lc.n;
        let mut path = Vec::with_capacity(n + 1);
        let mut noises = Vec::with_capacity(n);
        path.push(*s);
        let mut cur = *s;
        for j in 0..n {
            let z = self.noise_fine(k, j, &cur);
            cur = self.scheme.step(&self.lc.c2, &cur, &z);
            noises.push(z);
            path.push(cur);
        }
        self.scheme.couple(self.coupling, &path, &noises, &self.fresh_coarse[r])
    }

    /// Terminal state of the scheme that refines exactly the steps listed in `set`.
    pub fn terminal(&self, set: &SchemeSet) -> S::State {
        let n = self.lc.n;
        let mut s = self.scheme.start();
        for k in 0..n {
            if set.coarse.contains(&k) {
                for j in 0..n {
                    if set.sub && self.refinement.sub == Some((k, j)) {
                        for z in &self.finer_leaf {
                            s = self.scheme.step(&self.lc.c3, &s, z);
                        }
                    } else {
                        let z = self.noise_fine(k, j, &s);
                        s = self.scheme.step(&self.lc.c2, &s, &z);
                    }
                }
            } else {
                let z = self.noise_coarse(k, &s);
                s = self.scheme.step(&self.lc.c1, &s, &z);
            }
        }
        s
    }
}

/// Terminal states of the six nested schemes `X^{n,0..5}` of a level-3 plan.
/// For `n = 1` the pair schemes are returned equal to `X^{n,0}`.
pub fn simulate_level3<F: Real, S: GridScheme<F>, R: Rng + ?Sized>(
    scheme: &S,
    lc: &LevelCoeffs<S::Coeffs>,
    plan: &GridPlan,
    coupling: Coupling,
    rng: &mut R,
) -> [S::State; 6] {
    let kappa = plan.kappa.expect("level-3 plan");
    let kp = plan.kappa_prime.expect("level-3 plan");
    let mut coarse = vec![kappa];
    if let Some((a, b)) = plan.pair {
        coarse.push(a);
        coarse.push(b);
    }
    let tree = Tree::draw(scheme, lc, coupling, Refinement::new(coarse, Some((kappa, kp))), rng);
    let x0 = tree.terminal(&SchemeSet::default());
    let x1 = tree.terminal(&SchemeSet { coarse: vec![kappa], sub: false });
    let x2 = tree.terminal(&SchemeSet { coarse: vec![kappa], sub: true });
    let (x3, x4, x5) = match plan.pair {
        Some((a, b)) => (
            tree.terminal(&SchemeSet { coarse: vec![a], sub: false }),
            tree.terminal(&SchemeSet { coarse: vec![b], sub: false }),
            tree.terminal(&SchemeSet { coarse: vec![a, b], sub: false }),
        ),
        None => (x0, x0, x0),
    };
    [x0, x1, x2, x3, x4, x5]
}

/// Sample-sharing layout of the second-order estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Layout {
    /// The first `min(M1, M2)` base samples are the coarse paths of the correction samples.
    #[default]
    Shared,
    Independent,
}

/// Closed-form optimal `(M1, M2)` for a target standard deviation `epsilon` of the estimator.
pub fn allocate_samples(
    sigma2_sq: f64,
    sigma4_sq: f64,
    gamma_cov: f64,
    zeta: f64,
    epsilon: f64,
    layout: Layout,
) -> Result<(u64, u64)> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    if sigma2_sq < 0.0 || sigma4_sq < 0.0 || !(zeta > 0.0) {
        return Err(Error::InvalidParameter("variances must be >= 0 and zeta > 0".into()));
    }
    let (a, b) = allocation_numerators(sigma2_sq, sigma4_sq, gamma_cov, zeta, layout);
    let e2 = epsilon * epsilon;
    Ok(((a / e2).ceil() as u64, (b / e2).ceil() as u64))
}

/// Numerators `(A, B)` with `M1 = A / eps^2`, `M2 = B / eps^2`.
pub fn allocation_numerators(s2: f64, s4: f64, gamma: f64, zeta: f64, layout: Layout) -> (f64, f64) {
    match layout {
        Layout::Independent => {
            let cross = (s2 * s4).sqrt();
            (s2 + zeta.sqrt() * cross, s4 + cross / zeta.sqrt())
        }
        Layout::Shared => {
            let base = (s2 + 2.0 * gamma).max(0.0);
            let corr = s4 + 2.0 * gamma;
            if zeta * base >= corr && zeta > 1.0 {
                let z1 = zeta - 1.0;
                (base + (base * s4 * z1).sqrt(), s4 + (base * s4 / z1).sqrt())
            } else {
                // Base samples come for free with the corrections, so both counts coincide.
                let total = s2 + 2.0 * gamma + s4;
                (total, total)
            }
        }
    }
}

/// Pilot statistics of the second-order estimator.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PilotStats {
    pub sigma2_sq: f64,
    pub sigma4_sq: f64,
    pub gamma: f64,
    /// Cost of a correction sample over a base sample, counted in scheme steps.
    pub zeta: f64,
}

/// Settings for [`estimator_order2`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Order2Config {
    pub coupling: Coupling,
    pub layout: Layout,
    pub pilot_samples: u64,
}

impl Default for Order2Config {
    fn default() -> Self {
        Self { coupling: Coupling::Standard, layout: Layout::Shared, pilot_samples: 10_000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Order2Report {
    pub estimate: Estimate,
    pub m1: u64,
    pub m2: u64,
    pub base: Welford,
    /// Mean and variance of `n (f(X^{n,1}) - f(X^{n,0}))`.
    pub correction: Welford,
    pub cov: f64,
    pub pilot: PilotStats,
}

const PURPOSE_BASE: u64 = 1;
const PURPOSE_CORR: u64 = 2;
const PURPOSE_PILOT: u64 = 3;
const PURPOSE_L3: u64 = 4;
const PURPOSE_PAIR: u64 = 5;

fn check_finite(index: u64, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { index, value: v })
    }
}

/// Plain Monte Carlo estimate of `E f(X^n_T)` on the uniform grid.
pub fn estimator_order1<F, S, P>(scheme: &S, payoff: &P, maturity: F, n: usize, samples: u64, seed: u64) -> Result<Estimate>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    let lc = LevelCoeffs::new(scheme, maturity, n);
    let stream = stream_id(PURPOSE_BASE, n);
    let w = parallel_chunks(
        samples,
        |lo, hi| {
            let mut rng = sample_rng(seed, stream, lo);
            let mut scratch = Scratch::default();
            let mut w = Welford::default();
            for i in lo..hi {
                reposition(&mut rng, i);
                let s = simulate_uniform(scheme, &lc, &mut rng, &mut scratch);
                w.push(check_finite(i, to_f64(payoff(&s)))?);
            }
            Ok(w)
        },
        Welford::merge,
    )?;
    Ok(Estimate::from_welford(&w))
}

/// One correction sample: `(f(X^{n,0}), n (f(X^{n,1}) - f(X^{n,0})), steps)`.
fn correction_sample<F, S, P>(
    scheme: &S,
    payoff: &P,
    lc: &LevelCoeffs<S::Coeffs>,
    coupling: Coupling,
    rng: &mut ChaCha8Rng,
    scratch: &mut Scratch<F, S>,
) -> (f64, f64, u64)
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    let n = lc.n;
    let kappa = rng.random_range(0..n);
    let (c, f) = simulate_level2(scheme, lc, kappa, coupling, rng, scratch);
    let f0 = to_f64(payoff(&c));
    let f1 = to_f64(payoff(&f));
    let steps = (kappa + n + 1 + 2 * (n - kappa - 1)) as u64;
    (f0, n as f64 * (f1 - f0), steps)
}

fn base_sample<F, S, P>(scheme: &S, payoff: &P, lc: &LevelCoeffs<S::Coeffs>, rng: &mut ChaCha8Rng, scratch: &mut Scratch<F, S>) -> f64
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    to_f64(payoff(&simulate_uniform(scheme, lc, rng, scratch)))
}

#[derive(Clone, Copy, Default)]
struct SharedAcc {
    pair: Welford2,
    base: Welford,
    steps: u64,
}

impl SharedAcc {
    fn merge(self, o: Self) -> Self {
        Self { pair: self.pair.merge(o.pair), base: self.base.merge(o.base), steps: self.steps + o.steps }
    }
}

fn run_shared<F, S, P>(
    scheme: &S,
    payoff: &P,
    lc: &LevelCoeffs<S::Coeffs>,
    coupling: Coupling,
    m1: u64,
    m2: u64,
    seed: u64,
    stream: u64,
) -> Result<SharedAcc>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    parallel_chunks(
        m1.max(m2),
        |lo, hi| {
            let mut rng = sample_rng(seed, stream, lo);
            let mut scratch = Scratch::default();
            let mut acc = SharedAcc::default();
            for i in lo..hi {
                reposition(&mut rng, i);
                if i < m2 {
                    let (f0, corr, steps) = correction_sample(scheme, payoff, lc, coupling, &mut rng, &mut scratch);
                    acc.pair.push(check_finite(i, f0)?, check_finite(i, corr)?);
                    acc.steps += steps;
                    if i < m1 {
                        acc.base.push(f0);
                    }
                } else {
                    acc.base.push(check_finite(i, base_sample(scheme, payoff, lc, &mut rng, &mut scratch))?);
                }
            }
            Ok(acc)
        },
        SharedAcc::merge,
    )
}

/// Variances, covariance and step-count cost ratio from `samples` correction samples.
pub fn pilot_order2<F, S, P>(
    scheme: &S,
    payoff: &P,
    maturity: F,
    n: usize,
    coupling: Coupling,
    samples: u64,
    seed: u64,
) -> Result<PilotStats>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    let lc = LevelCoeffs::new(scheme, maturity, n);
    let acc = run_shared(scheme, payoff, &lc, coupling, samples, samples, seed, stream_id(PURPOSE_PILOT, n))?;
    let zeta = if acc.pair.n == 0 { 2.5 } else { acc.steps as f64 / acc.pair.n as f64 / n as f64 };
    Ok(PilotStats { sigma2_sq: acc.pair.var_x(), sigma4_sq: acc.pair.var_y(), gamma: acc.pair.cov(), zeta })
}

fn check_refinable<F: Real, S: GridScheme<F>>(scheme: &S) -> Result<()> {
    if scheme.supports_refinement() {
        Ok(())
    } else {
        Err(Error::InvalidParameter("scheme cannot be coupled across refined grids".into()))
    }
}

/// `E f(X^{n,0}) + n E[f(X^{n,1}) - f(X^{n,0})]` with `m1` base samples and `m2` correction samples.
#[allow(clippy::too_many_arguments)]
pub fn estimator_order2_counts<F, S, P>(
    scheme: &S,
    payoff: &P,
    maturity: F,
    n: usize,
    m1: u64,
    m2: u64,
    cfg: &Order2Config,
    pilot: PilotStats,
    seed: u64,
) -> Result<Order2Report>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    check_refinable(scheme)?;
    let lc = LevelCoeffs::new(scheme, maturity, n);
    let (base, pair) = match cfg.layout {
        Layout::Shared => {
            let acc = run_shared(scheme, payoff, &lc, cfg.coupling, m1, m2, seed, stream_id(PURPOSE_BASE, n))?;
            (acc.base, acc.pair)
        }
        Layout::Independent => {
            let base = run_shared(scheme, payoff, &lc, cfg.coupling, m1, 0, seed, stream_id(PURPOSE_BASE, n))?.base;
            let pair = run_shared(scheme, payoff, &lc, cfg.coupling, 0, m2, seed, stream_id(PURPOSE_CORR, n))?.pair;
            (base, pair)
        }
    };
    let correction = pair.y();
    let cov = if cfg.layout == Layout::Shared && pair.n > 1 { pair.cov() } else { 0.0 };
    let mut var = 0.0;
    if m1 > 0 {
        var += base.variance() / m1 as f64;
    }
    if m2 > 0 {
        var += correction.variance() / m2 as f64 + 2.0 * cov / m1.max(m2) as f64;
    }
    let value = base.mean + if m2 > 0 { correction.mean } else { 0.0 };
    let nominal = m1.max(1);
    Ok(Order2Report {
        estimate: Estimate::from_parts(value, var.max(0.0) * nominal as f64, nominal),
        m1,
        m2,
        base,
        correction,
        cov,
        pilot,
    })
}

/// Second-order estimator with `samples` base paths and the correction count in the optimal
/// ratio measured on a pilot run.
pub fn estimator_order2<F, S, P>(
    scheme: &S,
    payoff: &P,
    maturity: F,
    n: usize,
    samples: u64,
    cfg: &Order2Config,
    seed: u64,
) -> Result<Order2Report>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    check_refinable(scheme)?;
    if n == 1 {
        // Both grids coincide, the correction is zero pathwise.
        return estimator_order2_counts(scheme, payoff, maturity, n, samples, 2.min(samples), cfg, PilotStats::default(), seed);
    }
    let pilot = pilot_order2(scheme, payoff, maturity, n, cfg.coupling, cfg.pilot_samples, seed)?;
    let (a, b) = allocation_numerators(pilot.sigma2_sq, pilot.sigma4_sq, pilot.gamma, pilot.zeta, cfg.layout);
    let m2 = if a > 0.0 { ((samples as f64) * b / a).ceil() as u64 } else { samples };
    estimator_order2_counts(scheme, payoff, maturity, n, samples, m2.max(2), cfg, pilot, seed)
}

/// Second-order estimator sized so that the 95% half-width is `half_width`.
pub fn estimator_order2_target<F, S, P>(
    scheme: &S,
    payoff: &P,
    maturity: F,
    n: usize,
    half_width: f64,
    cfg: &Order2Config,
    seed: u64,
) -> Result<Order2Report>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    check_refinable(scheme)?;
    let pilot = pilot_order2(scheme, payoff, maturity, n, cfg.coupling, cfg.pilot_samples, seed)?;
    let (m1, m2) = allocate_samples(
        pilot.sigma2_sq,
        pilot.sigma4_sq,
        pilot.gamma,
        pilot.zeta,
        half_width / 1.96,
        cfg.layout,
    )?;
    estimator_order2_counts(scheme, payoff, maturity, n, m1.max(2), m2.max(2), cfg, pilot, seed)
}

/// Value of one level-3 sample:
/// `f0 + n (f1 - f0) + n^2 (f2 - f1) + n(n-1)/2 (f5 - f4 - f3 + f0)`.
pub fn order3_combination(n: usize, f: [f64; 6]) -> f64 {
    let nf = n as f64;
    f[0] + nf * (f[1] - f[0]) + nf * nf * (f[2] - f[1]) + pair_count(n) as f64 * (f[5] - f[4] - f[3] + f[0])
}

/// Third-order estimator: every sample evaluates all six nested schemes on one random plan.
pub fn estimator_order3<F, S, P>(
    scheme: &S,
    payoff: &P,
    maturity: F,
    n: usize,
    samples: u64,
    coupling: Coupling,
    seed: u64,
) -> Result<Estimate>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    check_refinable(scheme)?;
    let lc = LevelCoeffs::new(scheme, maturity, n);
    let stream = stream_id(PURPOSE_L3, n);
    let w = parallel_chunks(
        samples,
        |lo, hi| {
            let mut rng = sample_rng(seed, stream, lo);
            let mut w = Welford::default();
            for i in lo..hi {
                reposition(&mut rng, i);
                let plan = draw_grid(n, 3, &mut rng)?;
                let xs = simulate_level3(scheme, &lc, &plan, coupling, &mut rng);
                let fs = xs.map(|x| to_f64(payoff(&x)));
                w.push(check_finite(i, order3_combination(n, fs))?);
            }
            Ok(w)
        },
        Welford::merge,
    )?;
    Ok(Estimate::from_welford(&w))
}

/// Variance of the correction `n (f(X^{n,1}) - f(X^{n,0}))` over `samples` draws.
pub fn correction_variance<F, S, P>(
    scheme: &S,
    payoff: &P,
    maturity: F,
    n: usize,
    samples: u64,
    coupling: Coupling,
    seed: u64,
) -> Result<Welford>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    check_refinable(scheme)?;
    let lc = LevelCoeffs::new(scheme, maturity, n);
    let acc = run_shared(scheme, payoff, &lc, coupling, 0, samples, seed, stream_id(PURPOSE_CORR, n))?;
    Ok(acc.pair.y())
}

/// `f(X^{2n}) - f(X^n)` on one pair of paths, the coarse step `k` driven by the aggregate of the
/// fine steps `2k` and `2k + 1`.
fn halving_sample<F, S, P>(
    scheme: &S,
    payoff: &P,
    fine_c: &S::Coeffs,
    coarse_c: &S::Coeffs,
    n: usize,
    coupling: Coupling,
    rng: &mut ChaCha8Rng,
    scratch: &mut Scratch<F, S>,
) -> f64
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    let leaves: Vec<&S::Coeffs> = vec![fine_c; 2 * n];
    scratch.noises.clear();
    scheme.draw_leaves(&leaves, rng, &mut scratch.noises);
    scratch.path.clear();
    let mut f = scheme.start();
    scratch.path.push(f);
    for z in &scratch.noises {
        f = scheme.step(fine_c, &f, z);
        scratch.path.push(f);
    }
    let mut c = scheme.start();
    for k in 0..n {
        let fresh = scheme.draw(rng);
        let z = scheme.couple(coupling, &scratch.path[2 * k..=2 * k + 2], &scratch.noises[2 * k..2 * k + 2], &fresh);
        c = scheme.step(coarse_c, &c, &z);
    }
    to_f64(payoff(&f)) - to_f64(payoff(&c))
}

/// Estimate of `P^{level,2n} f - P^{level,n} f` for `level` 1 or 2.
///
/// The uniform-grid parts are sampled on coupled pairs of paths. For `level = 2` the two
/// corrections are added from independent runs of `samples` draws each.
#[allow(clippy::too_many_arguments)]
pub fn estimator_self_difference<F, S, P>(
    scheme: &S,
    payoff: &P,
    maturity: F,
    n: usize,
    level: u8,
    samples: u64,
    coupling: Coupling,
    seed: u64,
) -> Result<Estimate>
where
    F: Real,
    S: GridScheme<F>,
    P: Fn(&S::State) -> F + Sync,
{
    if n == 0 || !(1..=2).contains(&level) || samples < 2 {
        return Err(Error::InvalidParameter("self difference needs n >= 1, level 1 or 2 and >= 2 samples".into()));
    }
    check_refinable(scheme)?;
    let coarse_c = scheme.coeffs(maturity / lit(n as f64));
    let fine_c = scheme.coeffs(maturity / lit(2.0 * n as f64));
    let stream = stream_id(PURPOSE_PAIR, n);
    let w = parallel_chunks(
        samples,
        |lo, hi| {
            let mut rng = sample_rng(seed, stream, lo);
            let mut scratch = Scratch::default();
            let mut w = Welford::default();
            for i in lo..hi {
                reposition(&mut rng, i);
                let d = halving_sample(scheme, payoff, &fine_c, &coarse_c, n, coupling, &mut rng, &mut scratch);
                w.push(check_finite(i, d)?);
            }
            Ok(w)
        },
        Welford::merge,
    )?;
    let m = samples as f64;
    let mut value = w.mean;
    let mut var = w.variance() / m;
    if level == 2 {
        for k in [2 * n, n] {
            let c = correction_variance(scheme, payoff, maturity, k, samples, coupling, seed)?;
            let sign = if k == n { -1.0 } else { 1.0 };
            value += sign * c.mean;
            var += c.variance() / m;
        }
    }
    Ok(Estimate::from_parts(value, var * m, samples))
}
