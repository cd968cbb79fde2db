//! Gauss-Legendre quadrature with adaptive bisection.

use crate::error::{Error, Result};

/// Nodes and weights of the `m`-point rule on `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on `P_m` from the Chebyshev-like initial guesses.
    pub fn new(m: usize) -> Self {
        assert!(m >= 1);
        let mut nodes = vec![0.0; m];
        let mut weights = vec![0.0; m];
        for i in 0..m.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (m as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(m, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let (_, d) = legendre(m, x);
            dp = if d != 0.0 { d } else { dp };
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[m - 1 - i] = x;
            weights[i] = w;
            weights[m - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn integrate<G: FnMut(f64) -> f64>(&self, lo: f64, hi: f64, mut g: G) -> f64 {
        let half = (hi - lo) / 2.0;
        let mid = (hi + lo) / 2.0;
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(mid + half * x))
            .sum::<f64>()
            * half
    }
}

/// `(P_m(x), P_m'(x))` by the three-term recurrence.
fn legendre(m: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if m == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=m {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = m as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Adaptive integration on `[lo, hi]`: a panel is accepted when it agrees with the sum of its halves.
pub fn adaptive<G: FnMut(f64) -> f64>(rule: &GaussLegendre, lo: f64, hi: f64, tol: f64, g: &mut G) -> Result<f64> {
    fn rec<G: FnMut(f64) -> f64>(
        rule: &GaussLegendre,
        lo: f64,
        hi: f64,
        whole: f64,
        tol: f64,
        depth: u32,
        g: &mut G,
    ) -> Result<f64> {
        let mid = 0.5 * (lo + hi);
        let left = rule.integrate(lo, mid, &mut *g);
        let right = rule.integrate(mid, hi, &mut *g);
        let both = left + right;
        let floor = 64.0 * f64::EPSILON * (left.abs() + right.abs());
        if (both - whole).abs() <= tol.max(floor) {
            return Ok(both);
        }
        if depth == 0 {
            return Err(Error::Integration(format!(
                "bisection exhausted on [{lo}, {hi}], discrepancy {}",
                (both - whole).abs()
            )));
        }
        let sub = (tol / 2.0).max(1e-15);
        Ok(rec(rule, lo, mid, left, sub, depth - 1, g)? + rec(rule, mid, hi, right, sub, depth - 1, g)?)
    }
    let whole = rule.integrate(lo, hi, &mut *g);
    if !whole.is_finite() {
        return Err(Error::Integration(format!("non-finite integrand on [{lo}, {hi}]")));
    }
    rec(rule, lo, hi, whole, tol, 30, g)
}

/// Integral over `[0, inf)` as a sum of panels of width `width`, stopped once a panel
/// and the one before it each contribute less than `tail_tol` in absolute value.
pub fn half_line<G: FnMut(f64) -> f64>(width: f64, tol: f64, tail_tol: f64, max_panels: usize, mut g: G) -> Result<f64> {
    let rule = GaussLegendre::new(24);
    let mut total = 0.0;
    let mut quiet = 0;
    for k in 0..max_panels {
        let lo = k as f64 * width;
        let panel = adaptive(&rule, lo, lo + width, tol, &mut g)?;
        total += panel;
        quiet = if panel.abs() < tail_tol { quiet + 1 } else { 0 };
        if quiet >= 2 {
            return Ok(total);
        }
    }
    Err(Error::Integration(format!(
        "tail still above {tail_tol} after {max_panels} panels of width {width}"
    )))
}
