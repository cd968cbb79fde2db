//! Counter-based random streams, streaming statistics and the parallel driver.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Samples handled by one rayon task. Fixed so that results do not depend on the thread count.
pub const CHUNK: u64 = 1 << 12;

/// Generator positioned at the start of sample `index` of `stream`.
///
/// Each sample owns `2^32` words of the ChaCha keystream.
pub fn sample_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((index as u128) << 32);
    rng
}

#[inline]
pub fn reposition(rng: &mut ChaCha8Rng, index: u64) {
    rng.set_word_pos((index as u128) << 32);
}

/// Stream identifier for a purpose tag and a grid size.
pub fn stream_id(purpose: u64, n: usize) -> u64 {
    ((n as u64) << 8) | (purpose & 0xff)
}

/// Running mean and variance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl Welford {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(self, o: Self) -> Self {
        if self.n == 0 {
            return o;
        }
        if o.n == 0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        let mean = self.mean + d * o.n as f64 / n as f64;
        let m2 = self.m2 + o.m2 + d * d * self.n as f64 * o.n as f64 / n as f64;
        Self { n, mean, m2 }
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

/// Running means, variances and covariance of a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Welford2 {
    pub n: u64,
    pub mean_x: f64,
    pub mean_y: f64,
    m2x: f64,
    m2y: f64,
    cxy: f64,
}

impl Welford2 {
    #[inline]
    pub fn push(&mut self, x: f64, y: f64) {
        self.n += 1;
        let nf = self.n as f64;
        let dx = x - self.mean_x;
        let dy = y - self.mean_y;
        self.mean_x += dx / nf;
        self.mean_y += dy / nf;
        self.m2x += dx * (x - self.mean_x);
        self.m2y += dy * (y - self.mean_y);
        self.cxy += dx * (y - self.mean_y);
    }

    pub fn merge(self, o: Self) -> Self {
        if self.n == 0 {
            return o;
        }
        if o.n == 0 {
            return self;
        }
        let n = self.n + o.n;
        let w = self.n as f64 * o.n as f64 / n as f64;
        let dx = o.mean_x - self.mean_x;
        let dy = o.mean_y - self.mean_y;
        Self {
            n,
            mean_x: self.mean_x + dx * o.n as f64 / n as f64,
            mean_y: self.mean_y + dy * o.n as f64 / n as f64,
            m2x: self.m2x + o.m2x + dx * dx * w,
            m2y: self.m2y + o.m2y + dy * dy * w,
            cxy: self.cxy + o.cxy + dx * dy * w,
        }
    }

    fn denom(&self) -> f64 {
        if self.n < 2 {
            f64::INFINITY
        } else {
            (self.n - 1) as f64
        }
    }

    pub fn var_x(&self) -> f64 {
        self.m2x / self.denom()
    }

    pub fn var_y(&self) -> f64 {
        self.m2y / self.denom()
    }

    pub fn cov(&self) -> f64 {
        self.cxy / self.denom()
    }

    pub fn x(&self) -> Welford {
        Welford { n: self.n, mean: self.mean_x, m2: self.m2x }
    }

    pub fn y(&self) -> Welford {
        Welford { n: self.n, mean: self.mean_y, m2: self.m2y }
    }
}

/// Monte Carlo result. `half_width = 1.96 sqrt(variance / n_samples)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    /// Per-sample variance, so that `variance / n_samples` is the variance of `value`.
    pub variance: f64,
    pub n_samples: u64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_parts(value: f64, variance: f64, n_samples: u64) -> Self {
        let half_width = if n_samples == 0 {
            f64::INFINITY
        } else {
            1.96 * (variance / n_samples as f64).sqrt()
        };
        Self { value, variance, n_samples, half_width }
    }

    pub fn from_welford(w: &Welford) -> Self {
        Self::from_parts(w.mean, w.variance(), w.n)
    }

    /// Standard error of `value`.
    pub fn std_err(&self) -> f64 {
        self.half_width / 1.96
    }
}

/// Splits `[0, count)` into fixed chunks, runs them on the rayon pool and merges in index order.
pub fn parallel_chunks<A, T, M>(count: u64, task: T, merge: M) -> Result<A>
where
    A: Send + Default,
    T: Fn(u64, u64) -> Result<A> + Sync,
    M: Fn(A, A) -> A,
{
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<Result<A>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            task(lo, (lo + CHUNK).min(count))
        })
        .collect();
    let mut acc = A::default();
    for p in parts {
        acc = merge(acc, p?);
    }
    Ok(acc)
}

/// Runs `sampler` on sample indices `0..samples`. Each call receives a generator positioned
/// at its own counter block, so the outcome only depends on `(seed, stream, samples)`.
pub fn run_estimate<S>(sampler: S, samples: u64, seed: u64, stream: u64) -> Result<Estimate>
where
    S: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let w = parallel_chunks(
        samples,
        |lo, hi| {
            let mut rng = sample_rng(seed, stream, lo);
            let mut w = Welford::default();
            for i in lo..hi {
                reposition(&mut rng, i);
                let v = sampler(&mut rng);
                if !v.is_finite() {
                    return Err(Error::NonFinite { index: i, value: v });
                }
                w.push(v);
            }
            Ok(w)
        },
        Welford::merge,
    )?;
    Ok(Estimate::from_welford(&w))
}

/// Same as [`run_estimate`] for pairs, returning the joint accumulator.
pub fn run_pairs<S>(sampler: S, samples: u64, seed: u64, stream: u64) -> Result<Welford2>
where
    S: Fn(&mut ChaCha8Rng) -> (f64, f64) + Sync,
{
    parallel_chunks(
        samples,
        |lo, hi| {
            let mut rng = sample_rng(seed, stream, lo);
            let mut w = Welford2::default();
            for i in lo..hi {
                reposition(&mut rng, i);
                let (x, y) = sampler(&mut rng);
                if !x.is_finite() {
                    return Err(Error::NonFinite { index: i, value: x });
                }
                if !y.is_finite() {
                    return Err(Error::NonFinite { index: i, value: y });
                }
                w.push(x, y);
            }
            Ok(w)
        },
        Welford2::merge,
    )
}

/// Least-squares fit of `ln|err|` against `ln(1/n)`; the slope is the observed weak order.
#[derive(Clone, Debug, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub points: Vec<(f64, f64)>,
    pub residual: f64,
    /// Points discarded because the error was zero or not finite.
    pub dropped: usize,
}

pub fn regress_slope(errors: &[(usize, f64)]) -> Result<SlopeFit> {
    let points: Vec<(f64, f64)> = errors
        .iter()
        .filter(|(_, e)| *e > 0.0 && e.is_finite())
        .map(|&(n, e)| (-(n as f64).ln(), e.ln()))
        .collect();
    let dropped = errors.len() - points.len();
    if points.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "slope fit needs two positive errors, got {}",
            points.len()
        )));
    }
    let m = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / m;
    let my = points.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = points
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(SlopeFit { slope, intercept, points, residual, dropped })
}

/// One CSV row of a convergence or variance experiment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Row {
    pub n: usize,
    pub estimate: Estimate,
    pub wallclock_s: f64,
}

pub const CSV_HEADER: &str = "n,estimate,variance,half_width,samples,wallclock_s";

pub fn write_csv<W: Write>(mut out: W, rows: &[Row]) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.12e},{:.12e},{:.12e},{},{:.6}",
            r.n, r.estimate.value, r.estimate.variance, r.estimate.half_width, r.estimate.n_samples, r.wallclock_s
        )?;
    }
    Ok(())
}
