//! Hybrid tree / finite-difference pricer for the Heston model.
//!
//! The variance follows a recombining lattice, the decorrelated log-price
//! `x = ln s - (rho/sigma) y` is handled by an implicit upwind scheme with the
//! coefficients frozen at the current lattice node.

use rayon::prelude::*;

use crate::cir::CirParams;
use crate::error::{Error, Result};
use crate::heston::HestonParams;
use crate::real::{lit, Real};

/// `x = ln s - (rho/sigma) y`.
pub fn transform_initial<F: Real>(s: F, y: F, p: &HestonParams<F>) -> Result<(F, F)> {
    if !(s > F::zero()) {
        return Err(Error::InvalidParameter(format!("spot must be positive, got {s}")));
    }
    Ok((s.ln() - p.rho / p.cir.sigma * y, y))
}

/// Drift of the decorrelated log-price when the variance is frozen at `y`.
pub fn mu_x<F: Real>(y: F, p: &HestonParams<F>) -> F {
    let c = &p.cir;
    let k = p.rho / c.sigma;
    p.r - p.delta - k * c.a + (k * c.b - lit(0.5)) * y
}

/// Variance lattice with its jump indices and probabilities.
#[derive(Clone, Debug)]
pub struct YLattice<F> {
    pub steps: usize,
    pub h: F,
    /// `nodes[n][k]`, `k = 0..=n`.
    pub nodes: Vec<Vec<F>>,
    pub k_up: Vec<Vec<usize>>,
    pub k_down: Vec<Vec<usize>>,
    pub p_up: Vec<Vec<F>>,
}

pub fn build_lattice<F: Real>(y0: F, p: &CirParams<F>, steps: usize, maturity: F) -> Result<YLattice<F>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("lattice needs at least one step".into()));
    }
    let h = maturity / lit(steps as f64);
    let sq = h.sqrt();
    let half_sigma = p.sigma / lit(2.0);
    let nodes: Vec<Vec<F>> = (0..=steps)
        .map(|n| {
            (0..=n)
                .map(|k| {
                    if 2 * k == n {
                        return y0;
                    }
                    let r = y0.sqrt() + half_sigma * lit::<F>(2.0 * k as f64 - n as f64) * sq;
                    if r > F::zero() {
                        r * r
                    } else {
                        F::zero()
                    }
                })
                .collect()
        })
        .collect();
    let mut k_up = Vec::with_capacity(steps);
    let mut k_down = Vec::with_capacity(steps);
    let mut p_up = Vec::with_capacity(steps);
    for n in 0..steps {
        let next = &nodes[n + 1];
        let (mut ku_row, mut kd_row, mut pu_row) = (Vec::new(), Vec::new(), Vec::new());
        for k in 0..=n {
            let y = nodes[n][k];
            let target = y + (p.a - p.b * y) * h;
            let ku = (k + 1..=n + 1).find(|&j| target <= next[j]).unwrap_or(n + 1);
            let kd = (0..=k).rev().find(|&j| target >= next[j]).unwrap_or(0);
            let den = next[ku] - next[kd];
            let pu = if den > F::zero() {
                ((target - next[kd]) / den).max(F::zero()).min(F::one())
            } else {
                F::one()
            };
            ku_row.push(ku);
            kd_row.push(kd);
            pu_row.push(pu);
        }
        k_up.push(ku_row);
        k_down.push(kd_row);
        p_up.push(pu_row);
    }
    Ok(YLattice { steps, h, nodes, k_up, k_down, p_up })
}

/// Tridiagonal matrix with `sub[i] = A[i][i-1]`, `sup[i] = A[i][i+1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TridiagonalOp<F> {
    pub sub: Vec<F>,
    pub diag: Vec<F>,
    pub sup: Vec<F>,
}

/// Implicit upwind operator for the frozen variance `y`. The first and last rows are identity rows.
pub fn assemble_operator<F: Real>(y: F, p: &HestonParams<F>, h: F, dx: F, x_count: usize) -> TridiagonalOp<F> {
    let alpha = h / dx * mu_x(y, p);
    let rho_bar2 = F::one() - p.rho * p.rho;
    let beta = h * rho_bar2 * y / (lit::<F>(2.0) * dx * dx);
    let lower = -beta - if alpha < F::zero() { alpha.abs() } else { F::zero() };
    let upper = -beta - if alpha > F::zero() { alpha.abs() } else { F::zero() };
    let diag = F::one() + lit::<F>(2.0) * beta + alpha.abs();
    let mut op = TridiagonalOp {
        sub: vec![lower; x_count],
        diag: vec![diag; x_count],
        sup: vec![upper; x_count],
    };
    if x_count > 0 {
        let last = x_count - 1;
        for i in [0, last] {
            op.sub[i] = F::zero();
            op.sup[i] = F::zero();
            op.diag[i] = F::one();
        }
    }
    op
}

/// Thomas algorithm for `A v = rhs`.
pub fn implicit_solve<F: Real>(op: &TridiagonalOp<F>, rhs: &[F]) -> Result<Vec<F>> {
    let m = rhs.len();
    assert_eq!(op.diag.len(), m);
    if m == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![F::zero(); m];
    let mut d = vec![F::zero(); m];
    let mut pivot = op.diag[0];
    if pivot == F::zero() {
        return Err(Error::ZeroPivot(0));
    }
    c[0] = op.sup[0] / pivot;
    d[0] = rhs[0] / pivot;
    for i in 1..m {
        pivot = op.diag[i] - op.sub[i] * c[i - 1];
        if pivot == F::zero() {
            return Err(Error::ZeroPivot(i));
        }
        c[i] = op.sup[i] / pivot;
        d[i] = (rhs[i] - op.sub[i] * d[i - 1]) / pivot;
    }
    for i in (0..m - 1).rev() {
        d[i] = d[i] - c[i] * d[i + 1];
    }
    Ok(d)
}

/// Truncated log-price grid `x0 + i dx`, `i = -half..=half`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XGrid<F> {
    pub x0: F,
    pub dx: F,
    pub half: usize,
}

impl<F: Real> XGrid<F> {
    pub fn len(&self) -> usize {
        2 * self.half + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn point(&self, i: usize) -> F {
        self.x0 + self.dx * lit::<F>(i as f64 - self.half as f64)
    }

    pub fn points(&self) -> Vec<F> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }
}

/// Grid wide enough to hold `width_sd` standard deviations of the decorrelated log-price.
pub fn default_grid<F: Real>(p: &HestonParams<F>, maturity: F, dx: F, width_sd: F) -> XGrid<F> {
    let (x0, _) = transform_initial(p.s0(), p.cir.x0, p).expect("positive spot");
    let c = &p.cir;
    let mean_y = c.x0.max(if c.b > F::zero() { c.a / c.b } else { c.x0 + c.a * maturity });
    let sd = ((F::one() - p.rho * p.rho) * mean_y * maturity).sqrt();
    let drift = (mu_x(F::zero(), p).abs() + mu_x(mean_y, p).abs()) * maturity;
    let reach = width_sd * sd.max(lit(0.05)) + drift;
    let half = (reach / dx).ceil().to_usize().unwrap_or(1).max(1);
    XGrid { x0, dx, half }
}

/// Value surface `u_0(x, y0)` on the grid for the payoff `f(x, y)`; no discounting applied.
pub fn backward_sweep<F, P>(lattice: &YLattice<F>, grid: &XGrid<F>, p: &HestonParams<F>, payoff: P) -> Result<Vec<F>>
where
    F: Real,
    P: Fn(F, F) -> F + Sync,
{
    let xs = grid.points();
    let n_steps = lattice.steps;
    let mut level: Vec<Vec<F>> = lattice.nodes[n_steps]
        .iter()
        .map(|&y| xs.iter().map(|&x| payoff(x, y)).collect())
        .collect();
    for n in (0..n_steps).rev() {
        let next = &level;
        let current: Result<Vec<Vec<F>>> = (0..=n)
            .into_par_iter()
            .map(|k| {
                let pu = lattice.p_up[n][k];
                let pd = F::one() - pu;
                let up = &next[lattice.k_up[n][k]];
                let down = &next[lattice.k_down[n][k]];
                let rhs: Vec<F> = up.iter().zip(down).map(|(&a, &b)| pu * a + pd * b).collect();
                let op = assemble_operator(lattice.nodes[n][k], p, lattice.h, grid.dx, xs.len());
                implicit_solve(&op, &rhs)
            })
            .collect();
        level = current?;
    }
    Ok(level.into_iter().next().expect("root level"))
}

/// European put by the hybrid method, discounted.
#[derive(Clone, Debug)]
pub struct HybridPrice<F> {
    pub price: F,
    pub grid: XGrid<F>,
    /// Discounted values on the grid for the initial variance.
    pub surface: Vec<F>,
}

pub fn hybrid_put<F: Real>(p: &HestonParams<F>, strike: F, maturity: F, steps: usize, dx: F, width_sd: F) -> Result<HybridPrice<F>> {
    let lattice = build_lattice(p.cir.x0, &p.cir, steps, maturity)?;
    let grid = default_grid(p, maturity, dx, width_sd);
    let k = p.rho / p.cir.sigma;
    let raw = backward_sweep(&lattice, &grid, p, |x, y| (strike - (x + k * y).exp()).max(F::zero()))?;
    let disc = (-p.r * maturity).exp();
    let surface: Vec<F> = raw.into_iter().map(|v| v * disc).collect();
    Ok(HybridPrice { price: surface[grid.half], grid, surface })
}
